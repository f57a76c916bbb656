#include "tandem/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tandem {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw std::invalid_argument("config: bad value for " + key + ": '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One accessor pair per key, in the order they are written.
struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename N, typename Get>
Field number_field(const char* key, Get get) {
  return {[key, get](ExperimentConfig& c, const std::string& v) { get(c) = parse_number<N>(key, v); },
          [get](const ExperimentConfig& c) {
            ExperimentConfig copy = c;
            if constexpr (std::is_floating_point_v<N>) {
              return fmt_double(get(copy));
            } else {
              return std::to_string(get(copy));
            }
          }};
}

#define INT_FIELD(key, expr) {key, number_field<int>(key, [](ExperimentConfig& c) -> int& { return expr; })}
#define I64_FIELD(key, expr) \
  {key, number_field<std::int64_t>(key, [](ExperimentConfig& c) -> std::int64_t& { return expr; })}
#define U64_FIELD(key, expr) \
  {key, number_field<std::uint64_t>(key, [](ExperimentConfig& c) -> std::uint64_t& { return expr; })}
#define DBL_FIELD(key, expr) {key, number_field<double>(key, [](ExperimentConfig& c) -> double& { return expr; })}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"variant",
       {[](ExperimentConfig& c, const std::string& v) { c.train.variant = parse_variant(v); },
        [](const ExperimentConfig& c) { return variant_name(c.train.variant); }}},
      I64_FIELD("steps", c.train.steps),
      INT_FIELD("batch_size", c.train.batch_size),
      INT_FIELD("seq_len", c.train.seq_len),
      DBL_FIELD("lr", c.train.lr.peak),
      I64_FIELD("warmup", c.train.lr.warmup),
      I64_FIELD("lr_total", c.train.lr.total),
      DBL_FIELD("min_lr_ratio", c.train.lr.min_ratio),
      DBL_FIELD("grad_clip", c.train.adam.grad_clip),
      DBL_FIELD("lambda", c.train.lambda),
      I64_FIELD("stage1_steps", c.train.stage1_steps),
      U64_FIELD("data_seed", c.train.data_seed),
      U64_FIELD("seed", c.seed),
      INT_FIELD("gamma", c.gamma),
      INT_FIELD("eval_windows", c.eval_windows),
      INT_FIELD("primary.d_model", c.primary.d_model),
      INT_FIELD("primary.n_layers", c.primary.n_layers),
      INT_FIELD("primary.n_heads", c.primary.n_heads),
      INT_FIELD("primary.d_ff", c.primary.d_ff),
      INT_FIELD("primary.max_context", c.primary.max_context),
      INT_FIELD("secondary.d_model", c.secondary.d_model),
      INT_FIELD("secondary.n_layers", c.secondary.n_layers),
      INT_FIELD("secondary.n_heads", c.secondary.n_heads),
      INT_FIELD("secondary.d_ff", c.secondary.d_ff),
      INT_FIELD("secondary.max_context", c.secondary.max_context),
  };
  return f;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::map<std::string, const Field*> index;
  for (const auto& [k, f] : fields()) index[k] = &f;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool lr_total_set = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second->set(c, value);
    lr_total_set |= key == "lr_total";
  }
  if (!lr_total_set) c.train.lr.total = c.train.steps;
  c.train.validate();
  c.primary.validate();
  c.secondary.validate();
  if (c.gamma < 1) throw std::invalid_argument("config: gamma must be >= 1");
  c.train.block_gamma = c.gamma;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a(format_config(c)); }

}  // namespace tandem
