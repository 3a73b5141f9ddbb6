#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peopl/tensor.hpp"
#include "peopl/universe.hpp"

namespace peopl {

// Plain comma-separated files: no quoting, fields must not contain commas.
// Blank lines are skipped.
std::vector<std::vector<std::string>> read_csv(const std::string& path);

// Tabular universe from a CSV with header `id,label[,sensitive],f0,...,fk`.
Universe ingest_csv(const std::string& path);

struct ImageData {
  Tensor images;  // [B,C,H,W]
  std::vector<int> labels;
  std::vector<int> sensitive;  // empty unless the label file has the column
  std::size_t size() const { return labels.size(); }
};

// Raw tensor file of rank 4 (or rank 3, read as one channel) plus a label
// CSV with a `label` column and optional `id` and `sensitive` columns. Labels
// are binary 0/1. Pixels are divided by rescale (255 maps 8-bit images to
// [0,1]; 1 keeps them).
ImageData ingest_raw_tensor(const std::string& tensor_path, const std::string& labels_path,
                            double rescale = 1.0);

struct TokenData {
  std::vector<SampleId> ids;
  std::vector<std::string> labels;
  std::vector<std::vector<std::int64_t>> tokens;
  std::size_t dropped = 0;  // rows shorter than min_tokens
};

// CSV with header `id,label,tokens`, tokens separated by spaces. Rows with
// fewer than min_tokens tokens are dropped and counted.
TokenData ingest_token_csv(const std::string& path, std::size_t min_tokens);

// Universe with token-sequence payloads; the label set is in order of first
// appearance.
Universe token_universe(const TokenData& data);

// 64-bit FNV-1a of a byte string, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& bytes);
std::string file_digest(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

// Shortest decimal form that round-trips the double ("%.17g" trimmed).
std::string format_double(double value);

}  // namespace peopl
