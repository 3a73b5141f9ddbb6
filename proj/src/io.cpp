#include "peopl/io.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "peopl/error.hpp"

namespace peopl {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw InvalidArgument(where + ": cannot parse '" + text + "' as a number");
  }
  return value;
}

std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header,
                                                const std::string& path) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!index.emplace(header[i], i).second) {
      throw InvalidArgument(path + ": duplicate column '" + header[i] + "'");
    }
  }
  return index;
}

int binary_label(const std::string& text, const std::string& where) {
  if (text == "0") return 0;
  if (text == "1") return 1;
  throw InvalidArgument(where + ": labels must be 0 or 1, got '" + text + "'");
}

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << contents;
  if (!out) throw Error("write failed for " + path);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    rows.push_back(split(line, ','));
  }
  return rows;
}

Universe ingest_csv(const std::string& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw InvalidArgument(path + ": empty file");
  const auto& header = rows[0];
  if (header.size() < 2 || header[0] != "id" || header[1] != "label") {
    throw InvalidArgument(path + ": header must start with id,label");
  }
  const bool has_sensitive = header.size() > 2 && header[2] == "sensitive";
  const std::size_t first = has_sensitive ? 3 : 2;
  for (std::size_t c = first; c < header.size(); ++c) {
    if (header[c] != "f" + std::to_string(c - first)) {
      throw InvalidArgument(path + ": feature columns must be f0..fk in order");
    }
  }
  std::vector<SampleSpec> samples;
  std::vector<std::string> labels, sensitive;
  auto remember = [](std::vector<std::string>& set, const std::string& v) {
    for (const auto& s : set) {
      if (s == v) return;
    }
    set.push_back(v);
  };
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = path + ":" + std::to_string(r + 1);
    if (rows[r].size() != header.size()) {
      throw InvalidArgument(where + ": expected " + std::to_string(header.size()) + " fields");
    }
    SampleSpec s;
    s.id = parse_number<SampleId>(rows[r][0], where);
    s.label = rows[r][1];
    remember(labels, s.label);
    if (has_sensitive) {
      s.sensitive = rows[r][2];
      remember(sensitive, rows[r][2]);
    }
    std::vector<double> features;
    for (std::size_t c = first; c < header.size(); ++c) {
      features.push_back(parse_number<double>(rows[r][c], where));
    }
    s.payload = std::move(features);
    samples.push_back(std::move(s));
  }
  return build_universe(std::move(samples), labels, sensitive);
}

ImageData ingest_raw_tensor(const std::string& tensor_path, const std::string& labels_path,
                            double rescale) {
  if (!(rescale > 0)) throw InvalidArgument("rescale must be positive");
  ImageData data;
  data.images = load_tensor(tensor_path);
  if (data.images.rank() == 3) {
    const auto& s = data.images.shape();
    data.images = data.images.reshaped({s[0], 1, s[1], s[2]});
  }
  if (data.images.rank() != 4) {
    throw InvalidArgument(tensor_path + ": expected a [B,C,H,W] or [B,H,W] tensor, got " +
                          shape_string(data.images.shape()));
  }
  if (rescale != 1.0) {
    for (double& v : data.images.values()) v /= rescale;
  }
  const auto rows = read_csv(labels_path);
  if (rows.empty()) throw InvalidArgument(labels_path + ": empty file");
  const auto index = header_index(rows[0], labels_path);
  if (!index.count("label")) throw InvalidArgument(labels_path + ": missing label column");
  const bool has_sensitive = index.count("sensitive") > 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = labels_path + ":" + std::to_string(r + 1);
    if (rows[r].size() != rows[0].size()) {
      throw InvalidArgument(where + ": expected " + std::to_string(rows[0].size()) + " fields");
    }
    data.labels.push_back(binary_label(rows[r][index.at("label")], where));
    if (has_sensitive) data.sensitive.push_back(binary_label(rows[r][index.at("sensitive")], where));
  }
  if (data.labels.size() != data.images.dim(0)) {
    throw InvalidArgument(labels_path + ": " + std::to_string(data.labels.size()) +
                          " labels for " + std::to_string(data.images.dim(0)) + " images");
  }
  return data;
}

TokenData ingest_token_csv(const std::string& path, std::size_t min_tokens) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw InvalidArgument(path + ": empty file");
  if (rows[0] != std::vector<std::string>{"id", "label", "tokens"}) {
    throw InvalidArgument(path + ": header must be id,label,tokens");
  }
  TokenData data;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = path + ":" + std::to_string(r + 1);
    if (rows[r].size() != 3) throw InvalidArgument(where + ": expected 3 fields");
    std::vector<std::int64_t> tokens;
    for (const std::string& t : split(rows[r][2], ' ')) {
      if (!t.empty()) tokens.push_back(parse_number<std::int64_t>(t, where));
    }
    if (tokens.size() < min_tokens) {
      ++data.dropped;
      continue;
    }
    data.ids.push_back(parse_number<SampleId>(rows[r][0], where));
    data.labels.push_back(rows[r][1]);
    data.tokens.push_back(std::move(tokens));
  }
  return data;
}

Universe token_universe(const TokenData& data) {
  std::vector<SampleSpec> samples;
  std::vector<std::string> label_set;
  for (std::size_t i = 0; i < data.ids.size(); ++i) {
    SampleSpec s;
    s.id = data.ids[i];
    s.label = data.labels[i];
    s.payload = data.tokens[i];
    bool seen = false;
    for (const auto& l : label_set) seen = seen || l == s.label;
    if (!seen) label_set.push_back(s.label);
    samples.push_back(std::move(s));
  }
  return build_universe(std::move(samples), label_set);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_digest(const std::string& path) { return fnv1a_hex(read_file(path)); }

std::string format_double(double value) {
  if (value == 0.0) value = 0.0;  // no "-0"
  char buf[40];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, value);
    if (std::strtod(buf, nullptr) == value) break;
  }
  return buf;
}

}  // namespace peopl
