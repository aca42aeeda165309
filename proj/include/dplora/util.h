//
// Copyright 2026 The dplora Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef DPLORA_UTIL_H_
#define DPLORA_UTIL_H_

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dplora {

// SplitMix64 finaliser.
std::uint64_t mix64(std::uint64_t x);

// Derives a child seed from a parent and a path of stream labels, e.g.
// derive_seed(run, {step, kNoiseStream}). Used for the run -> step -> draw
// hierarchy so that the order in which work is scheduled never changes which
// random numbers a given draw sees.
std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

// FNV-1a, 64-bit. Used for config and checkpoint content hashes (integrity,
// not security).
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

// Little-endian hex dump of raw doubles, and its inverse. Bit-exact.
std::string doubles_to_hex(std::span<const double> values);
std::vector<double> hex_to_doubles(std::string_view hex);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
bool file_exists(const std::string& path);

// Shortest decimal form that round-trips, for CSV and report output.
std::string format_double(double value);

}  // namespace dplora

#endif  // DPLORA_UTIL_H_
