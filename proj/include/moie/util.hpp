#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"

namespace moie {

// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context);

std::string sha256_hex(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
// Writes atomically enough for our purposes: truncate + write + check.
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Shortest decimal text that round-trips the double exactly.
std::string format_double(double v);
// Fixed-precision rendering for human-facing tables.
std::string fixed(double v, int digits);

// Evaluation thread count: MOIE_THREADS if set and positive, else hardware
// concurrency (at least 1).
std::size_t eval_threads();

// Calls fn(begin, end) over fixed-size chunks of [0, n). The chunking does
// not depend on the thread count, so results written per row are identical
// for any MOIE_THREADS.
void parallel_chunks(std::size_t n, std::size_t chunk,
                     const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace moie
