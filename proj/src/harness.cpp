#include "peopl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <thread>
#include <utility>

#include "peopl/attacks.hpp"
#include "peopl/encoders.hpp"
#include "peopl/error.hpp"
#include "peopl/experiments.hpp"
#include "peopl/io.hpp"
#include "peopl/learning.hpp"
#include "peopl/random.hpp"
#include "peopl/synthetic.hpp"
#include "peopl/universe.hpp"

namespace peopl {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string> kKinds{"score",  "compose_sweep", "encode",
                                      "attack", "train",         "full_pipeline"};

[[noreturn]] void config_error(const std::string& path, const std::string& message) {
  throw InvalidArgument("config: " + (path.empty() ? std::string() : path + ": ") + message);
}

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

std::string index_path(const std::string& parent, std::size_t i) {
  return parent + "[" + std::to_string(i) + "]";
}

std::uint64_t as_u64(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  config_error(path, "expected a non-negative integer");
}

std::int64_t as_i64(const json& v, const std::string& path) {
  if (v.is_number_unsigned() || v.is_number_integer()) return v.get<std::int64_t>();
  config_error(path, "expected an integer");
}

double as_double(const json& v, const std::string& path) {
  if (!v.is_number()) config_error(path, "expected a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) config_error(path, "expected a string");
  return v.get<std::string>();
}

const json& as_array(const json& v, const std::string& path) {
  if (!v.is_array()) config_error(path, "expected an array");
  return v;
}

// Names end up in CSV cells and directory names.
std::string as_name(const json& v, const std::string& path) {
  const std::string s = as_string(v, path);
  if (s.empty()) config_error(path, "names must not be empty");
  for (char c : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ||
                    c == '.' || c == '\'';
    if (!ok) config_error(path, "name '" + s + "' may only use letters, digits and _ - . '");
  }
  if (s == "." || s == "..") config_error(path, "invalid name '" + s + "'");
  return s;
}

// Reads one JSON object and remembers which keys were consumed; finish()
// rejects everything else.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_, "expected an object");
  }
  Fields(const Fields&) = delete;
  Fields& operator=(const Fields&) = delete;
  ~Fields() = default;

  const std::string& path() const { return path_; }
  std::string at(const std::string& key) const { return join_path(path_, key); }
  bool has(const std::string& key) const { return j_.contains(key); }

  const json& need(const std::string& key) {
    if (!has(key)) config_error(at(key), "missing required field");
    used_.insert(key);
    return j_.at(key);
  }
  const json* find(const std::string& key) {
    if (!has(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  std::uint64_t u64(const std::string& key) { return as_u64(need(key), at(key)); }
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) {
    const json* v = find(key);
    return v ? as_u64(*v, at(key)) : fallback;
  }
  std::size_t size(const std::string& key, std::size_t fallback, std::size_t min = 0) {
    const std::size_t v = static_cast<std::size_t>(u64(key, fallback));
    if (v < min) config_error(at(key), "must be at least " + std::to_string(min));
    return v;
  }
  double number(const std::string& key, double fallback) {
    const json* v = find(key);
    return v ? as_double(*v, at(key)) : fallback;
  }
  double positive(const std::string& key, double fallback) {
    const double v = number(key, fallback);
    if (!(v > 0) || !std::isfinite(v)) config_error(at(key), "must be a positive number");
    return v;
  }
  double fraction(const std::string& key, double fallback) {
    const double v = number(key, fallback);
    if (!(v >= 0 && v <= 1)) config_error(at(key), "must lie in [0, 1]");
    return v;
  }
  bool boolean(const std::string& key, bool fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    if (!v->is_boolean()) config_error(at(key), "expected true or false");
    return v->get<bool>();
  }
  std::string string(const std::string& key) { return as_string(need(key), at(key)); }
  std::string string(const std::string& key, const std::string& fallback) {
    const json* v = find(key);
    return v ? as_string(*v, at(key)) : fallback;
  }
  std::string choice(const std::string& key, const std::vector<std::string>& allowed) {
    if (!has(key)) config_error(at(key), "missing required field");
    return choice(key, std::string(), allowed);
  }
  std::string choice(const std::string& key, const std::string& fallback,
                     const std::vector<std::string>& allowed) {
    const std::string v = string(key, fallback);
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      config_error(at(key), "'" + v + "' is not one of " + list);
    }
    return v;
  }
  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    std::vector<double> out;
    for (std::size_t i = 0; i < as_array(*v, at(key)).size(); ++i) {
      out.push_back(as_double((*v)[i], index_path(at(key), i)));
    }
    return out;
  }
  std::vector<std::size_t> sizes(const std::string& key, std::vector<std::size_t> fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < as_array(*v, at(key)).size(); ++i) {
      out.push_back(static_cast<std::size_t>(as_u64((*v)[i], index_path(at(key), i))));
    }
    return out;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) config_error(at(it.key()), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Parsing of shared pieces

SyntheticImageSpec parse_image(const json* j, const std::string& path) {
  SyntheticImageSpec spec;
  if (!j) return spec;
  Fields f(*j, path);
  spec.side = f.size("side", spec.side, 2);
  spec.noise = f.number("noise", spec.noise);
  spec.shallow_ramp = f.number("shallow_ramp", spec.shallow_ramp);
  spec.steep_ramp = f.number("steep_ramp", spec.steep_ramp);
  spec.exposure = f.number("exposure", spec.exposure);
  spec.sensitive_agreement = f.fraction("sensitive_agreement", spec.sensitive_agreement);
  if (spec.noise < 0) config_error(f.at("noise"), "must be non-negative");
  f.finish();
  return spec;
}

void parse_image_encoder_fields(Fields& f, ImageEncoderSpec& spec) {
  spec.kind = parse_encoder_kind(f.choice("kind", to_string(spec.kind), {"patch", "linear"}));
  spec.channels = f.size("channels", spec.channels, 1);
  spec.height = f.size("height", spec.height, 1);
  spec.width = f.size("width", spec.width, 1);
  spec.patch = f.size("patch", spec.patch, 1);
  spec.depth = f.size("depth", spec.depth, 1);
  spec.hidden = f.size("hidden", spec.hidden, 1);
  spec.norm = parse_norm_mode(f.choice("norm", to_string(spec.norm), {"batch", "fixed", "none"}));
  spec.bias = f.boolean("bias", spec.bias);
  try {
    closed_form_parameter_count(spec);
  } catch (const InvalidArgument& e) {
    config_error(f.path(), e.what());
  }
}

// Image dimensions default to the data's.
ImageEncoderSpec parse_image_encoder(const json& j, const std::string& path, std::size_t channels,
                                     std::size_t height, std::size_t width) {
  ImageEncoderSpec spec;
  spec.channels = channels;
  spec.height = height;
  spec.width = width;
  Fields f(j, path);
  parse_image_encoder_fields(f, spec);
  f.finish();
  return spec;
}

json encoder_json(const ImageEncoderSpec& s) {
  return {{"kind", to_string(s.kind)}, {"channels", s.channels}, {"height", s.height},
          {"width", s.width},          {"patch", s.patch},       {"depth", s.depth},
          {"hidden", s.hidden},        {"norm", to_string(s.norm)}, {"bias", s.bias}};
}

ClassifierSpec parse_classifier(const json* j, const std::string& path, ClassifierSpec spec) {
  if (!j) return spec;
  Fields f(*j, path);
  spec.kind = parse_classifier_kind(
      f.choice("kind", to_string(spec.kind), {"set_pool_mlp", "logistic", "attention_pool"}));
  spec.hidden = f.sizes("hidden", spec.hidden);
  for (std::size_t h : spec.hidden) {
    if (h == 0) config_error(f.at("hidden"), "layer widths must be positive");
  }
  spec.epochs = f.size("epochs", spec.epochs, 1);
  spec.lr = f.positive("lr", spec.lr);
  spec.weight_decay = f.number("weight_decay", spec.weight_decay);
  spec.batch_size = f.size("batch_size", spec.batch_size, 1);
  spec.patience = f.size("patience", spec.patience);
  f.finish();
  return spec;
}

json classifier_json(const ClassifierSpec& s) {
  return {{"kind", to_string(s.kind)}, {"hidden", s.hidden},
          {"epochs", s.epochs},        {"lr", s.lr},
          {"weight_decay", s.weight_decay}, {"batch_size", s.batch_size},
          {"patience", s.patience}};
}

// ---------------------------------------------------------------------------
// Tables and report files

struct Table {
  std::vector<std::string> columns;
  std::vector<json> rows;

  void add(json row) {
    for (const auto& c : columns) {
      if (!row.contains(c)) throw Error("internal: report row lacks column " + c);
    }
    rows.push_back(std::move(row));
  }
};

std::string csv_cell(const json& v) {
  if (v.is_null()) return "";
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::isnan(d)) return "nan";
    if (std::isinf(d)) return d > 0 ? "inf" : "-inf";
    return format_double(d);
  }
  if (v.is_string()) return v.get<std::string>();
  throw Error("internal: non-scalar CSV cell");
}

std::string to_csv(const Table& table) {
  std::string out;
  for (std::size_t c = 0; c < table.columns.size(); ++c) {
    out += (c ? "," : "") + table.columns[c];
  }
  out += "\n";
  for (const json& row : table.rows) {
    for (std::size_t c = 0; c < table.columns.size(); ++c) {
      out += (c ? "," : "") + csv_cell(row.at(table.columns[c]));
    }
    out += "\n";
  }
  return out;
}

// NaN has no JSON spelling; it is written as null.
json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

struct StageOutput {
  Table table;
  json details = json::object();
};

// ---------------------------------------------------------------------------
// Execution helpers

// Runs f(0..n-1) on up to `workers` threads. Each index writes only its own
// result slot, so the outcome does not depend on the worker count. The
// lowest-index failure is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& f) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex lock;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> guard(lock);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

fs::path absolute_normal(const fs::path& p) { return fs::weakly_canonical(fs::absolute(p)); }

bool inside(const fs::path& child, const fs::path& parent) {
  const fs::path c = absolute_normal(child), p = absolute_normal(parent);
  auto ci = c.begin();
  for (auto pi = p.begin(); pi != p.end(); ++pi, ++ci) {
    if (pi->empty()) continue;  // trailing separator
    if (ci == c.end() || *ci != *pi) return false;
  }
  return true;
}

// Shared state of one run: master seed of the current stage, where relative
// inputs live, where outputs go, and what the manifest records.
struct Context {
  std::uint64_t seed = 0;
  fs::path base;
  fs::path root_out;  // empty during validation
  fs::path out;
  int workers = 1;
  std::uint64_t budget = kDefaultBudget;
  std::string prefix;  // stage name prefix inside a pipeline
  std::optional<std::string> attack_type;
  json* stage_seeds = nullptr;
  json* inputs = nullptr;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
  }
  std::string input(const std::string& written, const std::string& field) {
    const fs::path path = resolve(written);
    if (!fs::is_regular_file(path)) config_error(field, "input file not found: " + path.string());
    (*inputs)[written] = file_digest(path.string());
    return path.string();
  }
  std::uint64_t stage_seed(const std::string& stage) {
    const std::uint64_t s = derive_seed(seed, stage);
    (*stage_seeds)[prefix + stage] = s;
    return s;
  }
  std::vector<std::uint64_t> indexed_seeds(const std::string& stage, std::size_t count) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < count; ++i) seeds.push_back(derive_seed(seed, stage, i));
    (*stage_seeds)[prefix + stage] = seeds;
    return seeds;
  }
  ScoreOptions score_options(int threads) const { return {budget, threads}; }
};

using Runner = std::function<StageOutput(const Context&)>;

// ---------------------------------------------------------------------------
// score

Universe parse_universe(Fields& parent, Context& ctx) {
  Fields f(parent.need("universe"), parent.at("universe"));
  if (f.has("csv")) {
    for (const char* k : {"ids", "labels", "sensitive"}) {
      if (f.has(k)) config_error(f.at(k), "give either csv or ids/labels, not both");
    }
    const std::string path = ctx.input(f.string("csv"), f.at("csv"));
    f.finish();
    return ingest_csv(path);
  }
  const json& ids_j = as_array(f.need("ids"), f.at("ids"));
  const json& labels_j = as_array(f.need("labels"), f.at("labels"));
  if (ids_j.size() != labels_j.size()) {
    config_error(f.at("labels"), "needs one label per id");
  }
  std::vector<SampleSpec> samples;
  std::vector<std::string> label_set, sensitive_set;
  auto remember = [](std::vector<std::string>& set, const std::string& v) {
    if (std::find(set.begin(), set.end(), v) == set.end()) set.push_back(v);
  };
  const json* sensitive = f.find("sensitive");
  if (sensitive && as_array(*sensitive, f.at("sensitive")).size() != ids_j.size()) {
    config_error(f.at("sensitive"), "needs one value per id");
  }
  for (std::size_t i = 0; i < ids_j.size(); ++i) {
    SampleSpec s;
    s.id = as_i64(ids_j[i], index_path(f.at("ids"), i));
    s.payload = std::vector<double>{static_cast<double>(s.id)};
    s.label = as_string(labels_j[i], index_path(f.at("labels"), i));
    remember(label_set, s.label);
    if (sensitive) {
      s.sensitive = as_string((*sensitive)[i], index_path(f.at("sensitive"), i));
      remember(sensitive_set, *s.sensitive);
    }
    samples.push_back(std::move(s));
  }
  f.finish();
  try {
    return build_universe(std::move(samples), label_set, sensitive_set);
  } catch (const InvalidArgument& e) {
    config_error(f.path(), e.what());
  }
}

std::vector<TableEncoder> parse_tables(const json& j, const std::string& path,
                                       const Universe& universe) {
  std::vector<TableEncoder> out;
  for (std::size_t e = 0; e < as_array(j, path).size(); ++e) {
    const std::string p = index_path(path, e);
    const json& row = as_array(j[e], p);
    if (row.size() != universe.size()) {
      config_error(p, "an encoder table needs one symbol per sample (" +
                          std::to_string(universe.size()) + ")");
    }
    std::vector<Symbol> mapping;
    for (std::size_t i = 0; i < row.size(); ++i) mapping.push_back(as_i64(row[i], index_path(p, i)));
    try {
      out.emplace_back(std::move(mapping));
    } catch (const InvalidArgument& err) {
      config_error(p, err.what());
    }
  }
  return out;
}

std::vector<double> weights_or_uniform(Fields& f, std::size_t count) {
  if (!f.has("weights")) return std::vector<double>(count, 1.0 / static_cast<double>(count));
  std::vector<double> w = f.numbers("weights", {});
  if (w.size() != count) config_error(f.at("weights"), "needs one weight per encoder");
  return w;
}

json family_json(const EncoderFamily& family) {
  json encoders = json::array();
  for (const auto& e : family.encoders()) encoders.push_back(e.mapping());
  return {{"size", family.size()}, {"encoders", encoders}, {"weights", family.weights()}};
}

const std::vector<std::string> kMetrics{"privacy",         "mismatched_uniform", "kl_gap_uniform",
                                        "decomposition",   "utility_single",     "utility_uniform"};

json observation_terms(const ScoreReport& report, const Universe& universe) {
  json terms = json::array();
  for (const auto& t : report.per_observation) {
    json pairs = json::array();
    for (const auto& [symbol, label] : t.observation.pairs()) {
      pairs.push_back({symbol, universe.label_set()[static_cast<std::size_t>(label)]});
    }
    terms.push_back(
        {{"observation", pairs}, {"probability", t.probability}, {"entropy_bits", t.entropy_bits}});
  }
  return terms;
}

Runner prepare_score(Fields& body, Context& ctx) {
  Universe universe = parse_universe(body, ctx);
  std::vector<std::pair<std::string, EncoderFamily>> families;
  auto lookup = [&](const std::string& name, const std::string& path) -> const EncoderFamily& {
    for (const auto& [n, fam] : families) {
      if (n == name) return fam;
    }
    config_error(path, "family '" + name + "' is not defined before this point");
  };
  const json& list = as_array(body.need("families"), body.at("families"));
  if (list.empty()) config_error(body.at("families"), "needs at least one family");
  for (std::size_t k = 0; k < list.size(); ++k) {
    Fields f(list[k], index_path(body.at("families"), k));
    const std::string name = as_name(f.need("name"), f.at("name"));
    for (const auto& [n, fam] : families) {
      if (n == name) config_error(f.at("name"), "duplicate family name '" + name + "'");
    }
    int forms = f.has("encoders") && !f.has("extend");
    for (const char* key : {"permutations", "compose", "extend"}) forms += f.has(key);
    if (forms != 1) {
      config_error(f.path(), "a family needs exactly one of encoders, permutations, compose, extend");
    }
    EncoderFamily family;
    try {
      if (f.has("permutations")) {
        const std::string kind = f.choice("permutations", "all", {"all", "label_preserving"});
        family = permutation_family(universe, kind == "all" ? PermutationKind::kAll
                                                            : PermutationKind::kLabelPreserving);
      } else if (f.has("compose")) {
        const json& pair = as_array(f.need("compose"), f.at("compose"));
        if (pair.size() != 2) config_error(f.at("compose"), "expected [inner, outer]");
        const EncoderFamily& inner = lookup(as_string(pair[0], index_path(f.at("compose"), 0)),
                                            f.at("compose"));
        const EncoderFamily& outer = lookup(as_string(pair[1], index_path(f.at("compose"), 1)),
                                            f.at("compose"));
        family = compose_families(inner, outer);
      } else if (f.has("extend")) {
        const EncoderFamily& base = lookup(as_string(f.need("extend"), f.at("extend")), f.at("extend"));
        std::vector<TableEncoder> extra = parse_tables(f.need("encoders"), f.at("encoders"), universe);
        family = grow_family(base, extra, weights_or_uniform(f, base.size() + extra.size()));
      } else {
        std::vector<TableEncoder> tables = parse_tables(f.need("encoders"), f.at("encoders"), universe);
        if (tables.empty()) config_error(f.at("encoders"), "needs at least one encoder");
        const std::vector<double> w = weights_or_uniform(f, tables.size());
        family = make_family(universe, std::move(tables), w);
      }
    } catch (const InvalidArgument& e) {
      const std::string what = e.what();
      if (what.rfind("config: ", 0) == 0) throw;
      config_error(f.path(), what);
    }
    f.finish();
    families.emplace_back(name, std::move(family));
  }

  std::vector<std::string> evaluate;
  if (const json* ev = body.find("evaluate")) {
    for (std::size_t i = 0; i < as_array(*ev, body.at("evaluate")).size(); ++i) {
      const std::string name = as_string((*ev)[i], index_path(body.at("evaluate"), i));
      lookup(name, index_path(body.at("evaluate"), i));
      evaluate.push_back(name);
    }
  } else {
    for (const auto& [n, fam] : families) evaluate.push_back(n);
  }
  const std::vector<std::size_t> ns = body.sizes("n", {1});
  if (ns.empty()) config_error(body.at("n"), "needs at least one dataset size");
  for (std::size_t n : ns) {
    if (n < 1 || n > universe.size()) {
      config_error(body.at("n"), "dataset sizes must lie in [1, " + std::to_string(universe.size()) + "]");
    }
  }
  std::vector<std::string> metrics;
  if (const json* m = body.find("metrics")) {
    for (std::size_t i = 0; i < as_array(*m, body.at("metrics")).size(); ++i) {
      const std::string p = index_path(body.at("metrics"), i);
      const std::string name = as_string((*m)[i], p);
      if (std::find(kMetrics.begin(), kMetrics.end(), name) == kMetrics.end()) {
        config_error(p, "unknown metric '" + name + "'");
      }
      metrics.push_back(name);
    }
  } else {
    metrics = {"privacy"};
  }
  if (metrics.empty()) config_error(body.at("metrics"), "needs at least one metric");

  return [universe = std::move(universe), families = std::move(families),
          evaluate = std::move(evaluate), ns, metrics](const Context& run) {
    StageOutput out;
    out.table.columns = {"family", "n", "metric", "bits", "evaluated"};
    const ScoreOptions options = run.score_options(run.workers);
    json fams = json::object();
    for (const auto& [name, fam] : families) fams[name] = family_json(fam);
    json results = json::array();
    for (const std::string& name : evaluate) {
      const EncoderFamily& fam =
          std::find_if(families.begin(), families.end(), [&](const auto& p) { return p.first == name; })
              ->second;
      for (std::size_t n : ns) {
        for (const std::string& metric : metrics) {
          auto emit = [&](const std::string& m, double bits, json evaluated, json extra) {
            out.table.add({{"family", name}, {"n", n}, {"metric", m},
                           {"bits", number_or_null(bits)}, {"evaluated", evaluated}});
            json detail = {{"family", name}, {"n", n}, {"metric", m}, {"bits", number_or_null(bits)}};
            if (!extra.is_null()) detail.update(extra);
            results.push_back(detail);
          };
          if (metric == "privacy") {
            const ScoreReport r = privacy_score(fam, universe, n, options);
            emit(metric, r.score_bits, r.evaluated, {{"terms", observation_terms(r, universe)}});
          } else if (metric == "mismatched_uniform") {
            const ScoreReport r =
                mismatched_privacy_score(fam, universe, n, uniform_q_builder(fam), options);
            emit(metric, r.score_bits, r.evaluated, {{"terms", observation_terms(r, universe)}});
          } else if (metric == "kl_gap_uniform") {
            emit(metric, kl_gap(fam, universe, n, uniform_q_builder(fam), options), nullptr, nullptr);
          } else if (metric == "decomposition") {
            const PrivacyDecomposition d = decompose_privacy_score(fam, universe, n, options);
            emit("h_data", d.h_data, nullptr, nullptr);
            emit("h_key_given_data", d.h_key_given_data, nullptr, nullptr);
          } else {
            const LabelingPrior prior = metric == "utility_single" ? single_labeling_prior(universe)
                                                                   : uniform_labeling_prior(universe);
            const ScoreReport r = utility_score(fam, universe, n, prior, options);
            emit(metric, r.score_bits, r.evaluated,
                 {{"label_entropy_bits", r.label_entropy_bits}});
          }
        }
      }
    }
    json ids = json::array(), labels = json::array();
    for (std::size_t i = 0; i < universe.size(); ++i) {
      ids.push_back(universe.id(i));
      labels.push_back(universe.label_set()[static_cast<std::size_t>(universe.label(i))]);
    }
    out.details = {{"universe", {{"ids", ids}, {"labels", labels}}},
                   {"families", fams},
                   {"results", results}};
    return out;
  };
}

// ---------------------------------------------------------------------------
// compose_sweep

Runner prepare_compose_sweep(Fields& body, Context& ctx) {
  ComposeSweepSpec spec;
  spec.trials = body.size("trials", spec.trials, 1);
  spec.max_universe = body.size("max_universe", spec.max_universe, 2);
  if (spec.max_universe > kMaxPermutationUniverse) {
    config_error(body.at("max_universe"),
                 "at most " + std::to_string(kMaxPermutationUniverse) + " samples");
  }
  spec.max_family = body.size("max_family", spec.max_family, 1);
  spec.labels = body.size("labels", spec.labels, 1);
  spec.n_values = body.sizes("n", spec.n_values);
  if (spec.n_values.empty()) config_error(body.at("n"), "needs at least one dataset size");
  for (std::size_t n : spec.n_values) {
    if (n == 0) config_error(body.at("n"), "dataset sizes must be positive");
  }
  const double tolerance = body.number("tolerance", 1e-9);
  const std::vector<std::uint64_t> seeds = ctx.indexed_seeds("compose_sweep", spec.trials);

  return [spec, tolerance, seeds](const Context& run) {
    std::vector<ComposeTrial> trials(spec.trials);
    parallel_for(spec.trials, run.workers, [&](std::size_t t) {
      trials[t] = run_compose_trial(spec, seeds[t], run.score_options(1));
    });
    StageOutput out;
    out.table.columns = {"trial",     "seed",       "universe",   "n",
                         "inner_size", "outer_size", "composite_size", "inner_bits",
                         "outer_bits", "composite_bits", "margin", "holds"};
    std::size_t violations = 0;
    double worst = INFINITY;
    for (std::size_t t = 0; t < trials.size(); ++t) {
      const ComposeTrial& r = trials[t];
      const double margin = r.composite_bits - std::max(r.inner_bits, r.outer_bits);
      const bool holds = margin >= -tolerance;
      violations += !holds;
      worst = std::min(worst, margin);
      out.table.add({{"trial", t},
                     {"seed", seeds[t]},
                     {"universe", r.universe.size()},
                     {"n", r.n},
                     {"inner_size", r.inner.size()},
                     {"outer_size", r.outer.size()},
                     {"composite_size", r.composite.size()},
                     {"inner_bits", r.inner_bits},
                     {"outer_bits", r.outer_bits},
                     {"composite_bits", r.composite_bits},
                     {"margin", margin},
                     {"holds", holds}});
    }
    out.details = {{"trials", spec.trials},
                   {"violations", violations},
                   {"worst_margin", worst},
                   {"tolerance", tolerance}};
    return out;
  };
}

// ---------------------------------------------------------------------------
// encode

Runner prepare_encode(Fields& body, Context& ctx) {
  Fields data(body.need("data"), body.at("data"));
  const std::string source = data.choice("source", "synthetic", {"synthetic", "raw_tensor", "token_csv"});
  std::optional<std::string> key_dir;
  if (const json* k = body.find("key_dir")) {
    const fs::path key = ctx.resolve(as_string(*k, body.at("key_dir")));
    if (!ctx.root_out.empty() && (inside(key, ctx.root_out) || inside(ctx.root_out, key))) {
      config_error(body.at("key_dir"),
                   "the private encoder must not be stored with the encoded data (" +
                       key.string() + " overlaps the output directory)");
    }
    key_dir = key.string();
  }

  const json& enc_j = body.need("encoder");
  const std::string enc_path = body.at("encoder");

  if (source == "token_csv") {
    const std::string path = ctx.input(data.string("path"), data.at("path"));
    const std::size_t min_tokens = data.size("min_tokens", 5);
    data.finish();
    Fields e(enc_j, enc_path);
    if (e.choice("kind", "rnn", {"rnn"}) != "rnn") config_error(e.at("kind"), "token data needs kind rnn");
    RnnEncoderSpec spec;
    spec.hidden = e.size("hidden", spec.hidden, 1);
    spec.vocab = e.size("vocab", spec.vocab, 1);
    spec.embedding_dim = e.size("embedding_dim", spec.embedding_dim, 1);
    spec.weight_scale = e.number("weight_scale", spec.weight_scale);
    spec.h0_range = e.number("h0_range", spec.h0_range);
    const bool sequence = e.choice("output", "final_state", {"final_state", "sequence"}) == "sequence";
    e.finish();
    spec.seed = ctx.stage_seed("encoder");
    return [path, min_tokens, spec, sequence, key_dir](const Context& run) {
      const TokenData tokens = ingest_token_csv(path, min_tokens);
      if (tokens.ids.empty()) throw InvalidArgument(path + ": no rows left after the token filter");
      const RnnEncoder encoder = RnnEncoder::build(spec);
      std::vector<Tensor> parts(tokens.ids.size());
      parallel_for(parts.size(), run.workers, [&](std::size_t i) {
        parts[i] = encoder.encode(tokens.tokens[i], sequence ? RnnOutput::kSequence : RnnOutput::kFinalState);
      });
      std::size_t total = 0;
      for (const auto& p : parts) total += p.dim(0);
      Tensor rows({total, spec.hidden});
      std::string labels = "id,label,rows\n";
      std::size_t at = 0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        std::copy(parts[i].values().begin(), parts[i].values().end(),
                  rows.values().begin() + static_cast<std::ptrdiff_t>(at * spec.hidden));
        at += parts[i].dim(0);
        labels += std::to_string(tokens.ids[i]) + "," + tokens.labels[i] + "," +
                  std::to_string(parts[i].dim(0)) + "\n";
      }
      const fs::path encoded = run.out / "encoded.ptnsr";
      save_tensor(encoded.string(), rows);
      write_file((run.out / "labels.csv").string(), labels);
      if (key_dir) {
        fs::create_directories(*key_dir);
        const json key = {{"kind", "rnn"},
                          {"hidden", spec.hidden},
                          {"vocab", spec.vocab},
                          {"embedding_dim", spec.embedding_dim},
                          {"weight_scale", spec.weight_scale},
                          {"h0_range", spec.h0_range},
                          {"seed", spec.seed},
                          {"adversarial", false}};
        write_file((fs::path(*key_dir) / "manifest.json").string(), dump(key));
      }
      StageOutput out;
      out.table.columns = {"source", "samples", "dropped", "rows", "dim", "encoded_digest"};
      out.table.add({{"source", "token_csv"},
                     {"samples", tokens.ids.size()},
                     {"dropped", tokens.dropped},
                     {"rows", total},
                     {"dim", spec.hidden},
                     {"encoded_digest", file_digest(encoded.string())}});
      out.details = {{"output", sequence ? "sequence" : "final_state"},
                     {"min_tokens", min_tokens},
                     {"key_saved", key_dir.has_value()}};
      return out;
    };
  }

  // Image sources: synthetic draws are made here so the encoder spec can
  // default to the data's dimensions.
  ImageData images;
  if (source == "synthetic") {
    const std::size_t count = data.size("count", 64, 1);
    const SyntheticImageSpec image = parse_image(data.find("image"), data.at("image"));
    data.finish();
    const ImageTask task = make_image_task(count, image, ctx.stage_seed("data"));
    images.images = task.images;
    images.labels = task.labels;
    images.sensitive = task.sensitive;
  } else {
    const std::string tensor = ctx.input(data.string("tensor"), data.at("tensor"));
    const std::string labels = ctx.input(data.string("labels"), data.at("labels"));
    const double rescale = data.positive("rescale", 1.0);
    data.finish();
    images = ingest_raw_tensor(tensor, labels, rescale);
  }
  const auto& shape = images.images.shape();
  ImageEncoderSpec spec = parse_image_encoder(enc_j, enc_path, shape[1], shape[2], shape[3]);
  if (spec.channels != shape[1] || spec.height != shape[2] || spec.width != shape[3]) {
    config_error(enc_path, "encoder dimensions do not match the images " + shape_string(shape));
  }
  spec.seed = ctx.stage_seed("encoder");
  const std::uint64_t shuffle = ctx.stage_seed("shuffle");
  return [images = std::move(images), spec, shuffle, source, key_dir](const Context& run) {
    const ImageEncoder encoder = ImageEncoder::build(spec);
    const Tensor rows = encoder.encode_batch(images.images, shuffle);
    const fs::path encoded = run.out / "encoded.ptnsr";
    save_tensor(encoded.string(), rows);
    const bool has_sensitive = !images.sensitive.empty();
    std::string labels = has_sensitive ? "index,label,sensitive\n" : "index,label\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
      labels += std::to_string(i) + "," + std::to_string(images.labels[i]);
      if (has_sensitive) labels += "," + std::to_string(images.sensitive[i]);
      labels += "\n";
    }
    write_file((run.out / "labels.csv").string(), labels);
    if (key_dir) save_encoder(*key_dir, encoder, false);
    StageOutput out;
    out.table.columns = {"source", "samples", "dropped", "rows", "dim", "encoded_digest"};
    out.table.add({{"source", source},
                   {"samples", images.size()},
                   {"dropped", 0},
                   {"rows", rows.dim(0)},
                   {"dim", rows.dim(1)},
                   {"encoded_digest", file_digest(encoded.string())}});
    out.details = {{"encoder", encoder_json(spec)},
                   {"set_size", encoder.num_patches()},
                   {"key_saved", key_dir.has_value()}};
    return out;
  };
}

// ---------------------------------------------------------------------------
// attack

struct Victim {
  std::string name;
  ImageEncoderSpec spec;
};

std::vector<Victim> parse_victims(Fields& body, std::size_t side) {
  std::vector<Victim> victims;
  const json& list = as_array(body.need("victims"), body.at("victims"));
  if (list.empty()) config_error(body.at("victims"), "needs at least one victim encoder");
  for (std::size_t v = 0; v < list.size(); ++v) {
    Fields f(list[v], index_path(body.at("victims"), v));
    Victim victim;
    victim.name = as_name(f.need("name"), f.at("name"));
    for (const auto& other : victims) {
      if (other.name == victim.name) config_error(f.at("name"), "duplicate victim name");
    }
    victim.spec.height = victim.spec.width = side;
    parse_image_encoder_fields(f, victim.spec);
    if (victim.spec.channels != 1 || victim.spec.height != side || victim.spec.width != side) {
      config_error(f.path(), "victim encoders must take the task's 1 x " + std::to_string(side) +
                                 " x " + std::to_string(side) + " images");
    }
    f.finish();
    victims.push_back(std::move(victim));
  }
  return victims;
}

AttackConfig parse_mmd(const json* j, const std::string& path) {
  AttackConfig c;
  if (!j) return c;
  Fields f(*j, path);
  c.epochs = f.size("epochs", c.epochs, 1);
  c.learning_rates = f.numbers("learning_rates", c.learning_rates);
  c.weight_decays = f.numbers("weight_decays", c.weight_decays);
  c.batch_size = f.size("batch_size", c.batch_size, 2);
  c.validation_fraction = f.fraction("validation_fraction", c.validation_fraction);
  c.bandwidth_multipliers = f.numbers("bandwidth_multipliers", c.bandwidth_multipliers);
  c.class_conditional = f.boolean("class_conditional", c.class_conditional);
  if (c.learning_rates.empty() || c.weight_decays.empty() || c.bandwidth_multipliers.empty()) {
    config_error(path, "learning_rates, weight_decays and bandwidth_multipliers must be non-empty");
  }
  for (double lr : c.learning_rates) {
    if (!(lr > 0)) config_error(f.at("learning_rates"), "learning rates must be positive");
  }
  for (double m : c.bandwidth_multipliers) {
    if (!(m > 0)) config_error(f.at("bandwidth_multipliers"), "multipliers must be positive");
  }
  f.finish();
  return c;
}

MatchingConfig parse_matching(const json* j, const std::string& path) {
  MatchingConfig c;
  if (!j) return c;
  Fields f(*j, path);
  c.iterations = f.size("iterations", c.iterations, 1);
  c.batch_size = f.size("batch_size", c.batch_size, 2);
  c.embedding = f.size("embedding", c.embedding, 1);
  c.hidden = f.size("hidden", c.hidden, 1);
  c.components = f.size("components", c.components, 1);
  c.lr = f.positive("lr", c.lr);
  f.finish();
  return c;
}

PlaintextAttackConfig parse_plaintext(const json* j, const std::string& path) {
  PlaintextAttackConfig c;
  if (!j) return c;
  Fields f(*j, path);
  c.steps = f.size("steps", c.steps, 1);
  c.lr = f.positive("lr", c.lr);
  c.heldout_fraction = f.fraction("heldout_fraction", c.heldout_fraction);
  f.finish();
  return c;
}

json grid_json(const std::vector<GridResult>& grid) {
  json out = json::array();
  for (const auto& g : grid) {
    out.push_back({{"lr", g.lr}, {"weight_decay", g.weight_decay},
                   {"validation_mmd", number_or_null(g.validation_mmd)}});
  }
  return out;
}

void save_recovered(const Context& run, const std::string& victim, std::size_t replicate,
                    const ImageEncoder& encoder) {
  const fs::path dir = run.out / "recovered" / (victim + "-r" + std::to_string(replicate));
  fs::create_directories(dir);
  save_encoder(dir.string(), encoder, true);
}

Runner prepare_attack(Fields& body, Context& ctx) {
  const std::vector<std::string> types{"mmd", "sensitive", "match"};
  std::string type = ctx.attack_type ? body.choice("type", *ctx.attack_type, types)
                                     : body.choice("type", types);
  if (ctx.attack_type && body.has("type") && type != *ctx.attack_type) {
    config_error(body.at("type"), "config asks for '" + type + "' but the command asks for '" +
                                      *ctx.attack_type + "'");
  }
  if (ctx.attack_type) type = *ctx.attack_type;
  const std::size_t replicates = body.size("replicates", 1, 1);

  if (type == "match") {
    for (const char* k : {"task", "mmd", "classifier"}) {
      if (body.has(k)) config_error(body.at(k), "not used by the match attack");
    }
    const std::size_t universe = body.size("universe", 64, 2);
    const SyntheticImageSpec image = parse_image(body.find("image"), body.at("image"));
    const std::vector<Victim> victims = parse_victims(body, image.side);
    const MatchingConfig matching = parse_matching(body.find("matching"), body.at("matching"));
    const PlaintextAttackConfig plaintext = parse_plaintext(body.find("plaintext"), body.at("plaintext"));
    const std::size_t rounds = body.size("rounds", 3, 1);
    const std::vector<std::uint64_t> seeds = ctx.indexed_seeds("attack", replicates);
    return [=](const Context& run) {
      const std::size_t jobs = victims.size() * replicates;
      std::vector<ChainTrial> trials(jobs);
      parallel_for(jobs, run.workers, [&](std::size_t k) {
        trials[k] = run_chain_trial(universe, image, victims[k / replicates].spec, matching,
                                    plaintext, rounds, seeds[k % replicates]);
      });
      StageOutput out;
      out.table.columns = {"victim",      "replicate",     "seed",          "untrained_auc",
                           "matching_auc", "matching_accuracy", "correct_pairs", "pair_ratio",
                           "recovery_ratio"};
      json details = json::array();
      for (std::size_t k = 0; k < jobs; ++k) {
        const ChainTrial& t = trials[k];
        const std::string& victim = victims[k / replicates].name;
        const std::size_t r = k % replicates;
        out.table.add({{"victim", victim},
                       {"replicate", r},
                       {"seed", seeds[r]},
                       {"untrained_auc", t.untrained.auc},
                       {"matching_auc", t.matching.auc},
                       {"matching_accuracy", t.matching.accuracy},
                       {"correct_pairs", t.correct_per_round.back()},
                       {"pair_ratio", number_or_null(t.recovery.attack.report.ratio)},
                       {"recovery_ratio", number_or_null(t.against_truth.ratio)}});
        details.push_back({{"victim", victim},
                           {"replicate", r},
                           {"correct_per_round", t.correct_per_round},
                           {"plaintext_loss_curve", t.recovery.attack.report.loss_curve},
                           {"train_mse", t.against_truth.train_mse},
                           {"heldout_mse", number_or_null(t.against_truth.heldout_mse)},
                           {"random_mse", number_or_null(t.against_truth.random_mse)}});
        save_recovered(run, victim, r, t.recovery.attack.encoder);
      }
      json vs = json::object();
      for (const auto& v : victims) vs[v.name] = encoder_json(v.spec);
      out.details = {{"type", "match"}, {"universe", universe}, {"rounds", rounds},
                     {"victims", vs},   {"trials", details}};
      return out;
    };
  }

  for (const char* k : {"universe", "image", "matching", "plaintext", "rounds"}) {
    if (body.has(k)) config_error(body.at(k), "not used by the " + type + " attack");
  }
  AttackTaskSpec task;
  if (const json* t = body.find("task")) {
    Fields f(*t, body.at("task"));
    task.private_count = f.size("private", task.private_count, 4);
    task.public_count = f.size("public", task.public_count, 4);
    task.heldout_count = f.size("heldout", task.heldout_count, 1);
    task.image = parse_image(f.find("image"), f.at("image"));
    f.finish();
  }
  const std::vector<Victim> victims = parse_victims(body, task.image.side);
  const AttackConfig mmd = parse_mmd(body.find("mmd"), body.at("mmd"));
  ClassifierSpec classifier_default;
  classifier_default.epochs = 30;
  const bool sensitive = type == "sensitive";
  if (!sensitive && body.has("classifier")) {
    config_error(body.at("classifier"), "only the sensitive attack trains a classifier");
  }
  const ClassifierSpec classifier =
      parse_classifier(body.find("classifier"), body.at("classifier"), classifier_default);
  const std::vector<std::uint64_t> seeds = ctx.indexed_seeds("attack", replicates);
  return [=](const Context& run) {
    const std::size_t jobs = victims.size() * replicates;
    std::vector<MmdTrial> trials(jobs);
    parallel_for(jobs, run.workers, [&](std::size_t k) {
      trials[k] = run_mmd_trial(task, victims[k / replicates].spec, mmd, seeds[k % replicates],
                                sensitive ? &classifier : nullptr);
    });
    StageOutput out;
    out.table.columns = {"victim",         "replicate",    "seed",
                         "validation_mmd", "initial_validation_mmd", "normalized_mse",
                         "random_normalized_mse", "lr", "weight_decay"};
    if (sensitive) {
      out.table.columns.push_back("auc_zstar");
      out.table.columns.push_back("auc_z");
    }
    json details = json::array();
    for (std::size_t k = 0; k < jobs; ++k) {
      const MmdTrial& t = trials[k];
      const AttackReport& rep = t.attack.report;
      const std::string& victim = victims[k / replicates].name;
      const std::size_t r = k % replicates;
      json row = {{"victim", victim},
                  {"replicate", r},
                  {"seed", seeds[r]},
                  {"validation_mmd", number_or_null(rep.validation_mmd)},
                  {"initial_validation_mmd", number_or_null(rep.initial_validation_mmd)},
                  {"normalized_mse", number_or_null(t.normalized_mse)},
                  {"random_normalized_mse", number_or_null(t.random_normalized_mse)},
                  {"lr", rep.lr},
                  {"weight_decay", rep.weight_decay}};
      if (sensitive) {
        row["auc_zstar"] = t.sensitive.auc_on_zstar;
        row["auc_z"] = t.sensitive.auc_on_z;
      }
      out.table.add(row);
      details.push_back({{"victim", victim},
                         {"replicate", r},
                         {"loss_curve", rep.loss_curve},
                         {"validation_curve", rep.validation_curve},
                         {"grid", grid_json(rep.grid)},
                         {"bandwidths", rep.kernel.bandwidths},
                         {"class_conditional", rep.class_conditional}});
      save_recovered(run, victim, r, t.attack.encoder);
    }
    json vs = json::object();
    for (const auto& v : victims) vs[v.name] = encoder_json(v.spec);
    out.details = {{"type", type},
                   {"task",
                    {{"private", task.private_count},
                     {"public", task.public_count},
                     {"heldout", task.heldout_count}}},
                   {"victims", vs},
                   {"trials", details}};
    if (sensitive) out.details["classifier"] = classifier_json(classifier);
    return out;
  };
}

// ---------------------------------------------------------------------------
// train

struct TrainJob {
  std::size_t replicate;
  Setting setting;
  int owner;
  bool raw;
};

std::string setting_name(const TrainJob& job) {
  return (job.raw ? "raw_" : "") + to_string(job.setting);
}

Runner prepare_train(Fields& body, Context& ctx) {
  const std::size_t replicates = body.size("replicates", 1, 1);
  UtilityTaskSpec task;
  if (const json* t = body.find("task")) {
    Fields f(*t, body.at("task"));
    task.owners = f.size("owners", task.owners, 1);
    task.per_owner = f.size("per_owner", task.per_owner, 10);
    task.image = parse_image(f.find("image"), f.at("image"));
    f.finish();
  }
  ImageEncoderSpec encoder;
  encoder.height = encoder.width = task.image.side;
  if (const json* e = body.find("encoder")) {
    encoder = parse_image_encoder(*e, body.at("encoder"), 1, task.image.side, task.image.side);
  }
  if (encoder.channels != 1 || encoder.height != task.image.side || encoder.width != task.image.side) {
    config_error(body.at("encoder"), "the encoder must take the task's images");
  }
  ClassifierSpec classifier_default;
  classifier_default.patience = 10;
  const ClassifierSpec classifier =
      parse_classifier(body.find("classifier"), body.at("classifier"), classifier_default);
  std::vector<Setting> settings;
  if (const json* s = body.find("settings")) {
    for (std::size_t i = 0; i < as_array(*s, body.at("settings")).size(); ++i) {
      const std::string p = index_path(body.at("settings"), i);
      try {
        settings.push_back(parse_setting(as_string((*s)[i], p)));
      } catch (const InvalidArgument& e) {
        config_error(p, e.what());
      }
    }
  } else {
    settings = {Setting::kSingleOwner, Setting::kCombinedClear, Setting::kCombinedRandomized};
  }
  if (settings.empty()) config_error(body.at("settings"), "needs at least one setting");
  for (Setting s : settings) {
    if (s != Setting::kSingleOwner && task.owners < 2) {
      config_error(body.at("settings"), to_string(s) + " needs at least two owners");
    }
  }
  const bool raw_baseline = body.boolean("raw_baseline", true);
  const std::vector<std::uint64_t> seeds = ctx.indexed_seeds("train", replicates);

  std::vector<TrainJob> jobs;
  for (std::size_t r = 0; r < replicates; ++r) {
    for (bool raw : {true, false}) {
      if (raw && !raw_baseline) continue;
      for (Setting s : settings) {
        if (raw && s == Setting::kCombinedRandomized) continue;  // no encoder to randomize
        if (s == Setting::kSingleOwner) {
          for (std::size_t d = 0; d < task.owners; ++d) jobs.push_back({r, s, static_cast<int>(d), raw});
        } else {
          jobs.push_back({r, s, -1, raw});
        }
      }
    }
  }

  return [=](const Context& run) {
    std::vector<std::vector<OwnerData>> owners(replicates);
    for (std::size_t r = 0; r < replicates; ++r) {
      for (std::size_t d = 0; d < task.owners; ++d) {
        const ImageTask t = make_image_task(task.per_owner, task.image,
                                            derive_seed(seeds[r], "owner_data", d), static_cast<int>(d));
        owners[r].push_back({t.images, t.labels});
      }
    }
    const EncodeFn raw = raw_image_encode(), enc = patch_encode(encoder);
    std::vector<TrainReport> reports(jobs.size());
    parallel_for(jobs.size(), run.workers, [&](std::size_t k) {
      const TrainJob& j = jobs[k];
      reports[k] = run_setting(j.setting, owners[j.replicate], j.raw ? raw : enc, classifier,
                               seeds[j.replicate], std::max(j.owner, 0));
    });
    StageOutput out;
    out.table.columns = {"setting", "task", "seed", "auc"};
    json details = json::array();
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      const TrainJob& j = jobs[k];
      const TrainReport& rep = reports[k];
      const std::uint64_t seed = seeds[j.replicate];
      if (j.setting == Setting::kSingleOwner) {
        const auto d = static_cast<std::size_t>(j.owner);
        out.table.add({{"setting", setting_name(j)}, {"task", "owner" + std::to_string(d)},
                       {"seed", seed}, {"auc", rep.test_auc[d]}});
      } else {
        for (std::size_t d = 0; d < rep.test_auc.size(); ++d) {
          out.table.add({{"setting", setting_name(j)}, {"task", "owner" + std::to_string(d)},
                         {"seed", seed}, {"auc", rep.test_auc[d]}});
        }
        out.table.add({{"setting", setting_name(j)}, {"task", "mean"}, {"seed", seed},
                       {"auc", rep.mean_auc}});
      }
      details.push_back({{"setting", setting_name(j)},
                         {"replicate", j.replicate},
                         {"owner", j.owner},
                         {"test_auc", rep.test_auc},
                         {"mean_auc", rep.mean_auc},
                         {"encoder_seeds", j.raw ? json::array() : json(rep.encoder_seeds)},
                         {"split_seed", rep.split_seed},
                         {"classifier_seed", rep.classifier_seed}});
    }
    out.details = {{"owners", task.owners},
                   {"per_owner", task.per_owner},
                   {"encoder", encoder_json(encoder)},
                   {"classifier", classifier_json(classifier)},
                   {"reports", details}};
    return out;
  };
}

// ---------------------------------------------------------------------------
// Dispatch

struct Prepared {
  std::string kind;
  Runner run;
  // Pipeline stages; empty otherwise.
  std::vector<std::pair<std::string, Prepared>> stages;
  std::uint64_t seed = 0;
};

Prepared prepare_kind(const std::string& kind, const json& body, const std::string& path,
                      Context& ctx);

Prepared prepare_pipeline(Fields& body, Context& ctx) {
  Prepared p;
  p.kind = "full_pipeline";
  const json& list = as_array(body.need("stages"), body.at("stages"));
  if (list.empty()) config_error(body.at("stages"), "needs at least one stage");
  for (std::size_t i = 0; i < list.size(); ++i) {
    Fields f(list[i], index_path(body.at("stages"), i));
    const std::string name = as_name(f.need("name"), f.at("name"));
    for (const auto& [other, st] : p.stages) {
      if (other == name) config_error(f.at("name"), "duplicate stage name");
    }
    const std::string kind = f.choice("kind", {"score", "compose_sweep", "encode", "attack", "train"});
    Context child = ctx;
    child.seed = ctx.stage_seed("stage." + name);
    child.prefix = ctx.prefix + name + "/";
    child.attack_type.reset();
    if (!ctx.out.empty()) child.out = ctx.out / name;
    Prepared stage = prepare_kind(kind, f.need(kind), f.at(kind), child);
    stage.seed = child.seed;
    f.finish();
    p.stages.emplace_back(name, std::move(stage));
  }
  return p;
}

Prepared prepare_kind(const std::string& kind, const json& body_j, const std::string& path,
                      Context& ctx) {
  Fields body(body_j, path);
  Prepared p;
  p.kind = kind;
  p.seed = ctx.seed;
  if (kind == "score") {
    p.run = prepare_score(body, ctx);
  } else if (kind == "compose_sweep") {
    p.run = prepare_compose_sweep(body, ctx);
  } else if (kind == "encode") {
    p.run = prepare_encode(body, ctx);
  } else if (kind == "attack") {
    p.run = prepare_attack(body, ctx);
  } else if (kind == "train") {
    p.run = prepare_train(body, ctx);
  } else {
    p = prepare_pipeline(body, ctx);
    p.seed = ctx.seed;
  }
  body.finish();
  return p;
}

struct Parsed {
  json effective;  // config after command-line overrides
  std::string kind;
  std::string name;
  std::uint64_t seed = 0;
  Context ctx;
  Prepared plan;
  json stage_seeds = json::object();
  json inputs = json::object();
};

std::unique_ptr<Parsed> parse(const json& config, const RunOptions& options, bool need_out) {
  auto parsed = std::make_unique<Parsed>();
  Fields top(config, "");
  const std::uint64_t version = top.u64("schema_version");
  if (version != static_cast<std::uint64_t>(kConfigSchemaVersion)) {
    config_error("schema_version", "unsupported version " + std::to_string(version) +
                                       " (this tool reads version " +
                                       std::to_string(kConfigSchemaVersion) + ")");
  }
  const std::string kind = top.choice("kind", kKinds);
  if (options.expected_kind && *options.expected_kind != kind) {
    config_error("kind", "the config is a '" + kind + "' experiment, not '" + *options.expected_kind + "'");
  }
  if (options.attack_type && kind != "attack") config_error("kind", "expected an attack config");
  parsed->kind = kind;
  parsed->name = top.has("name") ? as_name(top.need("name"), "name") : kind;
  top.string("description", "");
  if (options.seed) {
    parsed->seed = *options.seed;
    if (const json* v = top.find("seed")) as_u64(*v, "seed");
  } else {
    parsed->seed = top.u64("seed");
  }
  const std::string out_written = top.string("output_dir", "");
  std::uint64_t workers = top.u64("workers", 1);
  if (options.workers) {
    if (*options.workers < 1) throw InvalidArgument("--workers must be at least 1");
    workers = static_cast<std::uint64_t>(*options.workers);
  }
  if (workers < 1) config_error("workers", "must be at least 1");
  const std::uint64_t budget = options.budget.value_or(top.u64("budget", kDefaultBudget));
  if (budget < 1) config_error("budget", "must be at least 1");

  Context& ctx = parsed->ctx;
  ctx.seed = parsed->seed;
  ctx.base = options.base_dir.empty() ? fs::path(".") : fs::path(options.base_dir);
  if (options.out) {
    ctx.root_out = fs::path(*options.out);
  } else if (!out_written.empty()) {
    ctx.root_out = ctx.resolve(out_written);
  } else if (need_out) {
    config_error("output_dir", "no output directory (set output_dir or pass --out)");
  }
  ctx.out = ctx.root_out;
  ctx.workers = static_cast<int>(std::min<std::uint64_t>(workers, 256));
  ctx.budget = budget;
  ctx.attack_type = options.attack_type;
  ctx.stage_seeds = &parsed->stage_seeds;
  ctx.inputs = &parsed->inputs;

  parsed->plan = prepare_kind(kind, top.need(kind), kind, ctx);
  top.finish();

  json effective = config;
  effective["seed"] = parsed->seed;
  if (options.attack_type) effective["attack"]["type"] = *options.attack_type;
  effective.erase("output_dir");
  effective.erase("workers");
  parsed->effective = std::move(effective);
  return parsed;
}

json report_json(const std::string& kind, const std::string& name, std::uint64_t seed,
                 const StageOutput& out) {
  return {{"schema_version", kConfigSchemaVersion},
          {"tool_version", kToolVersion},
          {"kind", kind},
          {"name", name},
          {"seed", seed},
          {"columns", out.table.columns},
          {"rows", out.table.rows},
          {"details", out.details}};
}

StageOutput run_stage(const Prepared& plan, const Context& ctx) {
  fs::create_directories(ctx.out);
  return plan.run(ctx);
}

}  // namespace

ComposeTrial run_compose_trial(const ComposeSweepSpec& spec, std::uint64_t seed,
                               const ScoreOptions& options) {
  if (spec.max_universe < 2 || spec.max_universe > kMaxPermutationUniverse || spec.max_family < 1 ||
      spec.labels < 1 || spec.n_values.empty()) {
    throw InvalidArgument("run_compose_trial: invalid sweep spec");
  }
  Rng rng(seed);
  ComposeTrial trial;
  const std::size_t u = 2 + static_cast<std::size_t>(rng.below(spec.max_universe - 1));
  std::vector<SampleId> ids(u);
  std::vector<std::string> labels(u);
  for (std::size_t i = 0; i < u; ++i) {
    ids[i] = static_cast<SampleId>(i + 1);
    labels[i] = "y" + std::to_string(rng.below(spec.labels));
  }
  trial.universe = scalar_universe(ids, labels);
  trial.n = std::min<std::size_t>(spec.n_values[rng.below(spec.n_values.size())], u);
  if (trial.n == 0) throw InvalidArgument("run_compose_trial: dataset size must be positive");
  std::size_t permutations = 1;
  for (std::size_t k = 2; k <= u; ++k) permutations *= k;
  auto draw = [&] {
    const std::size_t size = 1 + static_cast<std::size_t>(rng.below(std::min(spec.max_family, permutations)));
    std::set<std::vector<Symbol>> seen;
    std::vector<TableEncoder> tables;
    while (tables.size() < size) {
      std::vector<Symbol> perm(ids.begin(), ids.end());
      rng.shuffle(std::span<Symbol>(perm));
      if (seen.insert(perm).second) tables.emplace_back(perm);
    }
    std::vector<double> w(size);
    double total = 0;
    for (double& x : w) total += (x = 0.05 + rng.uniform());
    for (double& x : w) x /= total;
    return make_family(trial.universe, std::move(tables), w);
  };
  trial.inner = draw();
  trial.outer = draw();
  trial.composite = compose_families(trial.inner, trial.outer);
  trial.inner_bits = privacy_score(trial.inner, trial.universe, trial.n, options).score_bits;
  trial.outer_bits = privacy_score(trial.outer, trial.universe, trial.n, options).score_bits;
  trial.composite_bits = privacy_score(trial.composite, trial.universe, trial.n, options).score_bits;
  return trial;
}

std::vector<std::string> stage_names(const std::string& kind) {
  if (kind == "compose_sweep") return {"compose_sweep"};
  if (kind == "encode") return {"data", "encoder", "shuffle"};
  if (kind == "attack") return {"attack"};
  if (kind == "train") return {"train"};
  if (kind == "full_pipeline") return {"stage.<name>"};
  return {};
}

json load_config(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("config: " + path + " is not valid JSON: " + e.what());
  }
}

void validate_config(const json& config, const RunOptions& options) {
  parse(config, options, false);
}

RunResult run_experiment(const json& config, const RunOptions& options) {
  const std::unique_ptr<Parsed> parsed = parse(config, options, true);
  const Context& ctx = parsed->ctx;
  const fs::path manifest_path = ctx.root_out / "manifest.json";
  if (fs::exists(manifest_path) && !options.force) {
    throw InvalidArgument("output directory " + ctx.root_out.string() +
                          " already holds a run (manifest.json exists); pass --force to overwrite");
  }
  fs::create_directories(ctx.root_out);
  const json manifest = {{"schema_version", kConfigSchemaVersion},
                         {"tool_version", kToolVersion},
                         {"kind", parsed->kind},
                         {"name", parsed->name},
                         {"master_seed", parsed->seed},
                         {"config_hash", fnv1a_hex(parsed->effective.dump())},
                         {"config", parsed->effective},
                         {"stage_seeds", parsed->stage_seeds},
                         {"inputs", parsed->inputs}};
  write_file(manifest_path.string(), dump(manifest));

  StageOutput out;
  if (parsed->kind == "full_pipeline") {
    out.table.columns = {"stage", "kind", "seed", "rows", "summary_digest"};
    json stages = json::array();
    for (const auto& [name, stage] : parsed->plan.stages) {
      Context child = ctx;
      child.out = ctx.root_out / name;
      child.seed = stage.seed;
      const StageOutput so = run_stage(stage, child);
      const json report = report_json(stage.kind, name, stage.seed, so);
      const std::string csv = to_csv(so.table);
      write_file((child.out / "report.json").string(), dump(report));
      write_file((child.out / "summary.csv").string(), csv);
      out.table.add({{"stage", name},
                     {"kind", stage.kind},
                     {"seed", stage.seed},
                     {"rows", so.table.rows.size()},
                     {"summary_digest", fnv1a_hex(csv)}});
      stages.push_back({{"name", name}, {"kind", stage.kind}, {"report", name + "/report.json"}});
    }
    out.details = {{"stages", stages}};
  } else {
    out = run_stage(parsed->plan, ctx);
  }

  RunResult result;
  result.out_dir = ctx.root_out.string();
  result.report = report_json(parsed->kind, parsed->name, parsed->seed, out);
  result.summary_csv = to_csv(out.table);
  write_file((ctx.root_out / "report.json").string(), dump(result.report));
  write_file((ctx.root_out / "summary.csv").string(), result.summary_csv);
  return result;
}

}  // namespace peopl
