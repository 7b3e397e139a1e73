#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace lpa3 {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Root seed with named, indexable substreams ("init", "noise", "shuffle",
// "attack", ...). Drawing from one stream never shifts another.
class SeedSequence {
public:
    explicit SeedSequence(std::uint64_t root) : root_(root) {}

    std::uint64_t root() const { return root_; }

    std::uint64_t derive(std::string_view name, std::initializer_list<std::uint64_t> index = {}) const {
        std::uint64_t h = splitmix64(root_ ^ fnv1a(name));
        for (auto i : index) h = splitmix64(h ^ splitmix64(i + 0x632BE59BD9B4E019ULL));
        return h;
    }

    std::mt19937_64 stream(std::string_view name, std::initializer_list<std::uint64_t> index = {}) const {
        return std::mt19937_64(derive(name, index));
    }

private:
    std::uint64_t root_;
};

}  // namespace lpa3
