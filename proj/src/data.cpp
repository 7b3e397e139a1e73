#include "lpa3/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "lpa3/rng.hpp"

namespace lpa3 {

namespace {

std::string slurp(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (f == nullptr) throw std::runtime_error("cannot open " + path.string());
    std::string out;
    char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw std::runtime_error("read error in " + path.string());
    return out;
}

std::uint32_t be32(const std::string& s, std::size_t at) {
    return (std::uint32_t(std::uint8_t(s[at])) << 24) | (std::uint32_t(std::uint8_t(s[at + 1])) << 16) |
           (std::uint32_t(std::uint8_t(s[at + 2])) << 8) | std::uint32_t(std::uint8_t(s[at + 3]));
}

std::size_t element_size(std::uint8_t type) {
    switch (type) {
        case 0x08: case 0x09: return 1;
        case 0x0C: case 0x0D: return 4;
        case 0x0E: return 8;
        default: return 0;
    }
}

template <class T, class U>
T from_be(const char* p) {
    U raw = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) raw = static_cast<U>((raw << 8) | std::uint8_t(p[i]));
    return std::bit_cast<T>(raw);
}

}  // namespace

IdxArray read_idx(const std::filesystem::path& path) {
    const std::string bytes = slurp(path);
    auto bad = [&](const std::string& what) { return std::runtime_error(path.string() + ": " + what); };
    if (bytes.size() < 4) throw bad("truncated IDX header");
    if (bytes[0] != 0 || bytes[1] != 0) throw bad("bad IDX magic");
    IdxArray a;
    a.type = std::uint8_t(bytes[2]);
    const std::size_t rank = std::uint8_t(bytes[3]);
    const std::size_t esize = element_size(a.type);
    if (esize == 0) throw bad("unsupported IDX element type");
    if (rank == 0) throw bad("IDX rank must be positive");
    if (bytes.size() < 4 + 4 * rank) throw bad("truncated IDX dimensions");
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        a.dims.push_back(be32(bytes, 4 + 4 * i));
        count *= a.dims.back();
    }
    const std::size_t offset = 4 + 4 * rank;
    if (bytes.size() != offset + count * esize) throw bad("payload size does not match dimensions");
    a.values.resize(count);
    const char* p = bytes.data() + offset;
    for (std::size_t i = 0; i < count; ++i, p += esize) {
        switch (a.type) {
            case 0x08: a.values[i] = std::uint8_t(*p); break;
            case 0x09: a.values[i] = std::int8_t(*p); break;
            case 0x0C: a.values[i] = from_be<std::int32_t, std::uint32_t>(p); break;
            case 0x0D: a.values[i] = from_be<float, std::uint32_t>(p); break;
            case 0x0E: a.values[i] = from_be<double, std::uint64_t>(p); break;
        }
    }
    return a;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
    const std::size_t esize = element_size(array.type);
    if (array.type != 0x08 && array.type != 0x0E) throw std::invalid_argument("write_idx: only ubyte and float64");
    std::size_t count = 1;
    for (auto d : array.dims) count *= d;
    if (count != array.values.size()) throw ShapeError("write_idx: values do not match dimensions");
    std::string out{'\0', '\0', char(array.type), char(array.dims.size())};
    auto put = [&](std::uint64_t v, std::size_t n) {
        for (std::size_t i = n; i-- > 0;) out.push_back(char((v >> (8 * i)) & 0xFF));
    };
    for (auto d : array.dims) put(d, 4);
    for (double v : array.values) {
        if (array.type == 0x08) put(static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)), 1);
        else put(std::bit_cast<std::uint64_t>(v), esize);
    }
    if (path.extension() == ".gz") {
        gzFile f = gzopen(path.string().c_str(), "wb");
        if (f == nullptr) throw std::runtime_error("cannot write " + path.string());
        const int n = gzwrite(f, out.data(), static_cast<unsigned>(out.size()));
        if (gzclose(f) != Z_OK || n != static_cast<int>(out.size())) throw std::runtime_error("write error in " + path.string());
        return;
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw std::runtime_error("write error in " + path.string());
}

Tensor Dataset::gather(std::span<const std::size_t> positions) const {
    Shape s{positions.size()};
    s.insert(s.end(), item_shape.begin(), item_shape.end());
    const std::size_t w = item_size();
    std::vector<double> v;
    v.reserve(positions.size() * w);
    for (auto p : positions) {
        if (p >= size()) throw std::out_of_range("dataset position out of range");
        v.insert(v.end(), pixels.begin() + p * w, pixels.begin() + (p + 1) * w);
    }
    return Tensor(std::move(s), std::move(v));
}

Tensor Dataset::all() const {
    std::vector<std::size_t> p(size());
    std::iota(p.begin(), p.end(), 0);
    return gather(p);
}

Dataset Dataset::without_labels() const {
    Dataset d = *this;
    std::fill(d.labels.begin(), d.labels.end(), kUnlabeled);
    return d;
}

Dataset synthetic_bars(const SyntheticSpec& spec) {
    constexpr std::size_t side = 8;
    Dataset d;
    d.item_shape = {1, side, side};
    d.num_classes = 2;
    auto rng = SeedSequence(spec.seed).stream("synthetic");
    std::uniform_int_distribution<std::size_t> pos(1, side - 2);
    std::uniform_real_distribution<double> bg(0.0, spec.max_background);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const std::int64_t label = static_cast<std::int64_t>(i % 2);
        const std::size_t at = pos(rng);
        const double background = bg(rng);
        for (std::size_t r = 0; r < side; ++r) {
            for (std::size_t c = 0; c < side; ++c) {
                const bool bar = label == 0 ? c == at : r == at;
                const double v = (bar ? 1.0 : background) + spec.noise_std * noise(rng);
                d.pixels.push_back(std::clamp(v, 0.0, 1.0));
            }
        }
        d.labels.push_back(label);
        d.ids.push_back(i);
    }
    return d;
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels) {
    IdxArray img = read_idx(images);
    IdxArray lab = read_idx(labels);
    if (img.type != 0x08 || (img.dims.size() != 3 && img.dims.size() != 4)) {
        throw std::runtime_error(images.string() + ": expected ubyte images (n, h, w) or (n, c, h, w)");
    }
    if (lab.type != 0x08 || lab.dims.size() != 1) throw std::runtime_error(labels.string() + ": expected ubyte labels (n)");
    if (lab.dims[0] != img.dims[0]) throw std::runtime_error("image and label counts differ");
    Dataset d;
    d.item_shape = img.dims.size() == 3 ? Shape{1, img.dims[1], img.dims[2]} : Shape{img.dims[1], img.dims[2], img.dims[3]};
    d.pixels = std::move(img.values);
    for (auto& v : d.pixels) v /= 255.0;
    std::int64_t max_label = 0;
    for (std::size_t i = 0; i < lab.dims[0]; ++i) {
        d.labels.push_back(static_cast<std::int64_t>(lab.values[i]));
        d.ids.push_back(i);
        max_label = std::max(max_label, d.labels.back());
    }
    d.num_classes = static_cast<std::size_t>(max_label) + 1;
    return d;
}

namespace {

Dataset subset(const Dataset& all, const std::vector<std::size_t>& positions) {
    Dataset d;
    d.item_shape = all.item_shape;
    d.num_classes = all.num_classes;
    const std::size_t w = all.item_size();
    for (auto p : positions) {
        d.pixels.insert(d.pixels.end(), all.pixels.begin() + p * w, all.pixels.begin() + (p + 1) * w);
        d.labels.push_back(all.labels[p]);
        d.ids.push_back(all.ids[p]);
    }
    return d;
}

}  // namespace

Splits split_dataset(const Dataset& all, const SplitSpec& spec) {
    if (spec.labeled > spec.pool) throw std::invalid_argument("label budget exceeds the pool size");
    if (spec.pool + spec.test > all.size()) {
        throw std::invalid_argument("pool + test (" + std::to_string(spec.pool + spec.test) + ") exceeds dataset size " +
                                    std::to_string(all.size()));
    }
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = SeedSequence(spec.seed).stream("split");
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t classes = std::max<std::size_t>(all.num_classes, 1);
    std::vector<std::size_t> quota(classes, spec.labeled / classes);
    for (std::size_t c = 0; c < spec.labeled % classes; ++c) ++quota[c];

    std::vector<std::size_t> labeled, unlabeled;
    for (std::size_t i = 0; i < spec.pool; ++i) {
        const std::size_t p = order[i];
        const auto c = static_cast<std::size_t>(all.labels[p]);
        if (c < classes && quota[c] > 0) {
            --quota[c];
            labeled.push_back(p);
        } else {
            unlabeled.push_back(p);
        }
    }
    for (auto q : quota) {
        if (q != 0) throw std::invalid_argument("pool lacks enough samples for a class-balanced label budget");
    }
    std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(spec.pool),
                                  order.begin() + static_cast<std::ptrdiff_t>(spec.pool + spec.test));

    Splits s;
    s.labeled = subset(all, labeled);
    Dataset u = subset(all, unlabeled);
    s.hidden_labels = u.labels;
    s.unlabeled = u.without_labels();
    s.test = subset(all, test);
    return s;
}

Splits load_dataset(const DatasetSource& source) {
    if (source.kind == "synthetic") return split_dataset(synthetic_bars(source.synthetic), source.split);
    if (source.kind == "idx") return split_dataset(load_idx_dataset(source.images, source.labels), source.split);
    throw std::invalid_argument("unknown dataset kind '" + source.kind + "' (expected synthetic or idx)");
}

}  // namespace lpa3
