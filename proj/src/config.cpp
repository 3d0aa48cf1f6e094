// SPDX-License-Identifier: Apache-2.0
#include "purify/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace purify {

using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Strips a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && quoted) {
      ++i;
    } else if (line[i] == '"') {
      quoted = !quoted;
    } else if (line[i] == '#' && !quoted) {
      return line.substr(0, i);
    }
  }
  return line;
}

bool is_bare_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

std::vector<std::string> split_array(const std::string& body) {
  std::vector<std::string> items;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (c == '\\' && quoted && i + 1 < body.size()) {
      cur += c;
      cur += body[++i];
      continue;
    }
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) items.push_back(trim(cur));
  return items;
}

std::optional<json> parse_number(const std::string& s) {
  long long i = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i);
  if (ec == std::errc() && p == s.data() + s.size()) return json(i);
  double d = 0;
  auto [q, ec2] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (ec2 == std::errc() && q == s.data() + s.size()) return json(d);
  return std::nullopt;
}

std::optional<json> parse_strict(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  if (s == "true") return json(true);
  if (s == "false") return json(false);
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') return std::nullopt;
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        const char e = s[++i];
        out += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else if (s[i] == '"') {
        return std::nullopt;
      } else {
        out += s[i];
      }
    }
    return json(out);
  }
  if (s.front() == '[') {
    if (s.back() != ']') return std::nullopt;
    json arr = json::array();
    for (const auto& item : split_array(s.substr(1, s.size() - 2))) {
      auto v = parse_strict(item);
      if (!v || v->is_array()) return std::nullopt;
      arr.push_back(*v);
    }
    return arr;
  }
  std::string digits = s;
  digits.erase(std::remove(digits.begin(), digits.end(), '_'), digits.end());
  if (!digits.empty() && digits.front() == '+') digits.erase(0, 1);
  return parse_number(digits);
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

std::string toml_value(const json& v) {
  if (v.is_string()) return quote(v.get<std::string>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) {
    std::ostringstream os;
    os.precision(17);
    os << v.get<double>();
    std::string s = os.str();
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
  }
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + toml_value(v[i]);
    return out + "]";
  }
  return v.dump();
}

}  // namespace

json parse_toml_value(const std::string& text) {
  if (auto v = parse_strict(text)) return *v;
  return json(trim(text));
}

json parse_toml(const std::string& text) {
  json doc = json::object();
  json* section = &doc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError("config line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail("unterminated section header");
      const std::string name = trim(s.substr(1, s.size() - 2));
      if (!is_bare_key(name)) fail("bad section name '" + name + "'");
      if (doc.contains(name)) fail("duplicate section [" + name + "]");
      doc[name] = json::object();
      section = &doc[name];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (!is_bare_key(key)) fail("bad key '" + key + "'");
    if (section->contains(key)) fail("duplicate key '" + key + "'");
    auto v = parse_strict(s.substr(eq + 1));
    if (!v) fail("cannot parse value for '" + key + "'");
    (*section)[key] = *v;
  }
  return doc;
}

json read_toml(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_toml(ss.str());
}

std::string to_toml(const json& sections) {
  std::string out;
  for (const auto& [name, body] : sections.items()) {
    if (!body.is_object()) out += name + " = " + toml_value(body) + "\n";
  }
  for (const auto& [name, body] : sections.items()) {
    if (!body.is_object()) continue;
    if (!out.empty()) out += "\n";
    out += "[" + name + "]\n";
    for (const auto& [k, v] : body.items()) out += k + " = " + toml_value(v) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Field registry
// ---------------------------------------------------------------------------

namespace {

struct Field {
  std::string key;
  std::function<json(const ResolvedConfig&)> get;
  std::function<void(ResolvedConfig&, const json&)> set;
};

[[noreturn]] void bad_type(const std::string& key, const char* want, const json& v) {
  throw ConfigError("config key " + key + ": expected " + want + ", got " + v.dump());
}

template <typename T>
T convert(const std::string& key, const json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad_type(key, "true or false", v);
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad_type(key, "an integer", v);
    if (std::is_unsigned_v<T> && v.get<long long>() < 0) bad_type(key, "a non-negative integer", v);
    return static_cast<T>(v.get<long long>());
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad_type(key, "a number", v);
    return v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad_type(key, "a string", v);
    return v.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
    if (!v.is_string()) bad_type(key, "a path string", v);
    return v.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<int>>) {
    if (!v.is_array()) bad_type(key, "an array of integers", v);
    std::vector<int> out;
    for (const auto& e : v) out.push_back(convert<int>(key, e));
    return out;
  } else {
    static_assert(std::is_same_v<T, std::vector<std::string>>);
    if (v.is_string()) return {v.get<std::string>()};
    if (!v.is_array()) bad_type(key, "an array of strings", v);
    std::vector<std::string> out;
    for (const auto& e : v) out.push_back(convert<std::string>(key, e));
    return out;
  }
}

template <typename T>
json to_value(const T& v) {
  if constexpr (std::is_same_v<T, std::filesystem::path>)
    return v.string();
  else
    return v;
}

template <typename Access>
Field plain(std::string key, Access access) {
  using T = std::remove_reference_t<decltype(access(std::declval<ResolvedConfig&>()))>;
  return {key, [access](const ResolvedConfig& c) { return to_value(access(const_cast<ResolvedConfig&>(c))); },
          [access, key](ResolvedConfig& c, const json& v) { access(c) = convert<T>(key, v); }};
}

template <typename Access, typename Parse, typename Print>
Field named(std::string key, Access access, Parse parse, Print print) {
  return {key, [access, print](const ResolvedConfig& c) { return json(print(access(const_cast<ResolvedConfig&>(c)))); },
          [access, parse, key](ResolvedConfig& c, const json& v) { access(c) = parse(convert<std::string>(key, v)); }};
}

const char* source_name(DatasetSpec::Source s) { return s == DatasetSpec::Source::directory ? "directory" : "synthetic"; }
DatasetSpec::Source parse_source(const std::string& s) {
  if (s == "directory") return DatasetSpec::Source::directory;
  if (s == "synthetic") return DatasetSpec::Source::builtin_synthetic;
  throw ConfigError("dataset.source must be directory or synthetic, got '" + s + "'");
}
const char* inter_name(InterMode m) { return m == InterMode::hinge ? "hinge" : "literal"; }
InterMode parse_inter(const std::string& s) {
  if (s == "hinge") return InterMode::hinge;
  if (s == "literal") return InterMode::literal;
  throw ConfigError("loss.inter_mode must be hinge or literal, got '" + s + "'");
}
const char* rule_name(TargetRule r) { return r == TargetRule::top9 ? "top9" : "none"; }
TargetRule parse_rule(const std::string& s) {
  if (s == "top9") return TargetRule::top9;
  if (s == "none") return TargetRule::none;
  throw ConfigError("attack.target_rule must be none or top9, got '" + s + "'");
}

#define FIELD(key, expr) plain(key, [](ResolvedConfig& c) -> auto& { return expr; })
#define NAMED(key, expr, parse, print) named(key, [](ResolvedConfig& c) -> auto& { return expr; }, parse, print)

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    auto fam = [](const std::string& s) { return parse_attack_family(s); };
    auto fam_name = [](AttackFamily a) { return to_string(a); };
    auto task = [](const std::string& s) { return parse_task_kind(s); };
    auto task_name = [](TaskKind k) { return to_string(k); };
    auto pixel_name = [](PixelAblation a) { return to_string(a); };
    auto feature_name = [](FeatureAblation a) { return to_string(a); };
    auto embedding_name = [](ProxyEmbedding e) { return to_string(e); };
    return std::vector<Field>{
        NAMED("dataset.source", c.train.dataset.source, parse_source, source_name),
        NAMED("dataset.task", c.train.dataset.task, task, task_name),
        FIELD("dataset.root", c.train.dataset.root),
        FIELD("dataset.channels", c.train.dataset.channels),
        FIELD("dataset.height", c.train.dataset.height),
        FIELD("dataset.width", c.train.dataset.width),
        FIELD("dataset.num_classes", c.train.dataset.num_classes),
        FIELD("dataset.augment_crop", c.train.dataset.augment_crop),
        FIELD("dataset.augment_flip", c.train.dataset.augment_flip),
        FIELD("dataset.n_per_class", c.train.dataset.synthetic.n_per_class),
        FIELD("dataset.amplitude", c.train.dataset.synthetic.amplitude),
        FIELD("dataset.amplitude_jitter", c.train.dataset.synthetic.amplitude_jitter),
        FIELD("dataset.brightness_lo", c.train.dataset.synthetic.brightness_lo),
        FIELD("dataset.brightness_hi", c.train.dataset.synthetic.brightness_hi),
        FIELD("dataset.noise", c.train.dataset.synthetic.noise),
        FIELD("dataset.template_sigma", c.train.dataset.synthetic.template_sigma),
        FIELD("dataset.max_shift", c.train.dataset.synthetic.max_shift),
        FIELD("dataset.seed", c.train.dataset.synthetic.seed),

        FIELD("model.path", c.train.target_model),
        FIELD("model.arch", c.model.arch),
        FIELD("model.epochs", c.model.fit.epochs),
        FIELD("model.batch_size", c.model.fit.batch_size),
        FIELD("model.lr", c.model.fit.optimizer.lr),
        FIELD("model.seed", c.model.fit.seed),

        FIELD("generator.num_downsample", c.train.generator.num_downsample),
        FIELD("generator.num_residual_blocks", c.train.generator.num_residual_blocks),
        FIELD("generator.base_filters", c.train.generator.base_filters),

        FIELD("discriminator.scales", c.train.discriminator.scales),
        FIELD("discriminator.tap_layers", c.train.discriminator.tap_layers),
        FIELD("discriminator.base_filters", c.train.discriminator.base_filters),

        NAMED("attack.family", c.train.attack.family, fam, fam_name),
        FIELD("attack.epsilon", c.train.attack.epsilon),
        FIELD("attack.alpha", c.train.attack.alpha),
        FIELD("attack.steps", c.train.attack.steps),
        FIELD("attack.targeted", c.train.attack.targeted),
        NAMED("attack.target_rule", c.train.attack.target_rule, parse_rule, rule_name),
        FIELD("attack.translation_invariant", c.train.attack.translation_invariant),
        FIELD("attack.ti_kernel_size", c.train.attack.ti_kernel_size),
        FIELD("attack.random_start", c.train.attack.random_start),
        FIELD("attack.deepfool_overshoot", c.train.attack.deepfool_overshoot),
        FIELD("attack.selector", c.train.attack.selector),

        FIELD("loss.lambda1", c.train.loss.lambda1),
        FIELD("loss.lambda2", c.train.loss.lambda2),
        FIELD("loss.lambda3", c.train.loss.lambda3),
        FIELD("loss.lambda4", c.train.loss.lambda4),
        FIELD("loss.margin", c.train.loss.margin),
        NAMED("loss.inter_mode", c.train.loss.inter_mode, parse_inter, inter_name),
        FIELD("loss.normalize_features", c.train.loss.normalize_features),
        FIELD("loss.perceptual_seed", c.train.perceptual_seed),
        FIELD("loss.segmentation_pixel_cap", c.train.grouping.segmentation_pixel_cap),

        FIELD("optimizer.lr", c.train.optimizer.lr),
        FIELD("optimizer.beta1", c.train.optimizer.beta1),
        FIELD("optimizer.beta2", c.train.optimizer.beta2),
        FIELD("optimizer.eps", c.train.optimizer.eps),
        FIELD("optimizer.grad_clip", c.train.grad_clip),

        NAMED("ablation.pixel", c.train.ablation.pixel, parse_pixel_ablation, pixel_name),
        NAMED("ablation.feature", c.train.ablation.feature, parse_feature_ablation, feature_name),
        FIELD("ablation.class_aware", c.train.ablation.class_aware),

        FIELD("train.batch_size", c.train.batch_size),
        FIELD("train.epochs", c.train.epochs),
        Field{"train.max_iterations",  // 0 = run for train.epochs
              [](const ResolvedConfig& c) { return json(c.train.max_iterations.value_or(0)); },
              [](ResolvedConfig& c, const json& v) {
                const auto n = convert<long long>("train.max_iterations", v);
                c.train.max_iterations = n > 0 ? std::optional<long long>(n) : std::nullopt;
              }},
        FIELD("train.seed", c.train.seed),
        FIELD("train.checkpoint_every", c.train.checkpoint_every),

        FIELD("proxy.enabled", c.train.proxy.enabled),
        FIELD("proxy.samples", c.train.proxy.samples),
        NAMED("proxy.embedding", c.train.proxy.embedding, parse_proxy_embedding, embedding_name),
        FIELD("proxy.probe_epochs", c.train.proxy.probe.epochs),
        FIELD("proxy.probe_lr", c.train.proxy.probe.lr),
        FIELD("proxy.probe_l2", c.train.proxy.probe.l2),
        FIELD("proxy.split_seed", c.train.proxy.probe.split_seed),

        FIELD("eval.attacks", c.eval.attacks),
        FIELD("eval.epsilon", c.eval.epsilon),
        FIELD("eval.alpha", c.eval.alpha),
        FIELD("eval.steps", c.eval.steps),
        FIELD("eval.targeted", c.eval.targeted),
        FIELD("eval.random_start", c.eval.random_start),
        FIELD("eval.substitute", c.eval.substitute),
        FIELD("eval.checkpoint", c.eval.checkpoint),
        FIELD("eval.limit", c.eval.limit),
        FIELD("eval.seed", c.eval.seed),
    };
  }();
  return f;
}

#undef FIELD
#undef NAMED

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void apply(ResolvedConfig& c, const std::string& key, const json& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  f->set(c, value);
  c.provenance[key] = Provenance::user;
}

}  // namespace

// ---------------------------------------------------------------------------

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& k : config_keys()) {
    // Compare the bare name too, so a right key in the wrong section still finds its home.
    const auto dot = k.find('.');
    const std::string bare = key.substr(key.find('.') == std::string::npos ? 0 : key.find('.') + 1);
    const std::size_t d = std::min(edit_distance(key, k), edit_distance(bare, k.substr(dot + 1)) + 1);
    if (d < best_d) best_d = d, best = k;
  }
  return best;
}

std::vector<AttackSpec> EvalSection::specs() const {
  std::vector<AttackSpec> out;
  for (const auto& name : attacks) {
    AttackSpec s;
    s.family = parse_attack_family(name);
    s.epsilon = epsilon;
    s.alpha = alpha;
    s.steps = steps;
    s.random_start = random_start;
    if (targeted) {
      s.targeted = true;
      s.target_rule = TargetRule::top9;
    }
    out.push_back(s);
  }
  return out;
}

Provenance ResolvedConfig::source(const std::string& key) const {
  auto it = provenance.find(key);
  if (it == provenance.end()) {
    if (!find_field(key)) throw ConfigError("unknown config key '" + key + "'");
    return Provenance::default_value;
  }
  return it->second;
}

json ResolvedConfig::to_json() const {
  json values = json::object(), prov = json::object();
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    values[f.key.substr(0, dot)][f.key.substr(dot + 1)] = f.get(*this);
    prov[f.key] = source(f.key) == Provenance::user ? "user" : "default";
  }
  return {{"values", values}, {"provenance", prov}};
}

std::string ResolvedConfig::to_toml() const { return purify::to_toml(to_json()["values"]); }

void ResolvedConfig::validate() const {
  train.dataset.validate();
  train.validate();
  if (model.fit.epochs < 1 || model.fit.batch_size < 1) throw ConfigError("model.epochs and model.batch_size must be >= 1");
  if (eval.attacks.empty()) throw ConfigError("eval.attacks must name at least one attack");
  for (const auto& s : eval.specs()) s.validate();
}

ResolvedConfig resolve_config(const json& file_values, const std::vector<std::pair<std::string, std::string>>& overrides) {
  ResolvedConfig c;
  for (const auto& [section, body] : file_values.items()) {
    if (!body.is_object()) {
      apply(c, section, body);  // top-level keys are always unknown; this reports them
      continue;
    }
    for (const auto& [k, v] : body.items()) apply(c, section + "." + k, v);
  }
  for (const auto& [k, v] : overrides) apply(c, k, parse_toml_value(v));

  // The generator and synthetic data follow the dataset geometry.
  auto& d = c.train.dataset;
  c.train.generator.channels = d.channels;
  c.train.generator.height = d.height;
  c.train.generator.width = d.width;
  d.synthetic.num_classes = d.num_classes;
  d.synthetic.channels = d.channels;
  d.synthetic.height = d.height;
  d.synthetic.width = d.width;
  c.train.resolved = c.to_json();
  return c;
}

ResolvedConfig resolve_config(const std::filesystem::path& file, const std::vector<std::pair<std::string, std::string>>& overrides) {
  return resolve_config(file.empty() ? json::object() : read_toml(file), overrides);
}

ResolvedConfig config_from_json(const json& doc) {
  ResolvedConfig c = resolve_config(doc.at("values"));
  c.provenance.clear();
  for (const auto& [k, v] : doc.at("provenance").items())
    c.provenance[k] = v.get<std::string>() == "user" ? Provenance::user : Provenance::default_value;
  c.train.resolved = c.to_json();
  return c;
}

}  // namespace purify
