// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include "purify/config.hpp"
#include "purify/diagnostics.hpp"
#include "purify/evaluation.hpp"
#include "purify/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace purify::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Common {
  std::string config;
  std::string tag;
  std::string runs = "runs";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Sectioned config file")->check(CLI::ExistingFile);
  sub->add_option("--tag", c.tag, "Suffix for the run directory name");
  sub->add_option("--runs-dir", c.runs, "Parent of the run directories")->capture_default_str();
  sub->allow_extras();
  sub->footer("Any config key can be overridden with --section.key value (or --section.key=value).");
}

// --a.b value / --a.b=value pairs; anything else left over is an error.
std::vector<std::pair<std::string, std::string>> overrides_from(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos)
      throw ValidationError("unexpected argument '" + a + "'");
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (i + 1 >= extras.size()) throw ValidationError("override " + a + " needs a value");
      out.emplace_back(a.substr(2), extras[++i]);
    }
  }
  return out;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
}

// Run directories are never reused: a clash gets a numeric suffix.
fs::path make_run_dir(const Common& c, const std::string& command) {
  const std::string base = timestamp() + "-" + (c.tag.empty() ? command : c.tag);
  fs::path dir = fs::path(c.runs) / base;
  for (int k = 1; fs::exists(dir); ++k) dir = fs::path(c.runs) / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

class Run {
 public:
  Run(const Common& c, const std::string& command, const std::vector<std::string>& extras, std::ostream& out)
      : out_(out) {
    cfg = resolve_config(fs::path(c.config), overrides_from(extras));
    cfg.validate();
    dir = make_run_dir(c, command);
    write_text(dir / "config.json", cfg.to_json().dump(2) + "\n");
    write_text(dir / "config.toml", cfg.to_toml());
    log_.open(dir / "log.txt");
    log("command " + command);
    if (!c.config.empty()) log("config " + c.config);
  }

  void log(const std::string& line) {
    log_ << line << '\n';
    log_.flush();
  }

  // Printed and logged.
  void say(const std::string& line) {
    out_ << line << '\n';
    log(line);
  }

  Dataset split(Split s) const {
    DatasetSpec spec = cfg.train.dataset;
    spec.split = s;
    Dataset d = load_dataset(spec);
    if (s == Split::test && cfg.eval.limit > 0 && cfg.eval.limit < d.size()) {
      std::vector<Index> rows(static_cast<size_t>(cfg.eval.limit));
      for (Index i = 0; i < cfg.eval.limit; ++i) rows[static_cast<size_t>(i)] = i;
      d = d.subset(rows);
    }
    return d;
  }

  std::unique_ptr<TargetModel<float>> target() const {
    if (cfg.train.target_model.empty()) throw ConfigError("model.path is required (train one with fit-target)");
    return load_target_model(cfg.train.target_model);
  }

  std::unique_ptr<TargetModel<float>> substitute() const {
    return cfg.eval.substitute.empty() ? nullptr : load_target_model(cfg.eval.substitute);
  }

  ResolvedConfig cfg;
  fs::path dir;

 private:
  std::ostream& out_;
  std::ofstream log_;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Tensor<float> rows_of(const Tensor<float>& t, Index start, Index count) {
  Shape s = t.shape();
  s[0] = count;
  Tensor<float> out(s);
  const Index per = t.size() / t.dim(0);
  std::copy(t.data() + start * per, t.data() + (start + count) * per, out.data());
  return out;
}

Tensor<float> adversarial_set(TargetModel<float>& source, const Dataset& data, const AttackSpec& spec,
                              std::uint64_t seed, Index chunk = 100) {
  Tensor<float> adv(data.images.shape());
  std::vector<Index> all(static_cast<size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) all[static_cast<size_t>(i)] = i;
  const LabelBatch y = data.labels_for(all);
  Rng rng(seed);
  const Index per = data.size() ? data.images.size() / data.size() : 0;
  for (Index s = 0; s < data.size(); s += chunk) {
    const Index k = std::min(chunk, data.size() - s);
    const auto part = generate_adversarial(as_attack_model(source), rows_of(data.images, s, k), slice_labels(y, s, k), spec, rng());
    std::copy(part.data(), part.data() + part.size(), adv.data() + s * per);
  }
  return adv;
}

Tensor<float> label_tensor(const Dataset& d) {
  if (!d.maps.empty()) {
    Tensor<float> t(Shape{d.size(), d.images.dim(2), d.images.dim(3)});
    std::transform(d.maps.begin(), d.maps.end(), t.data(), [](int v) { return static_cast<float>(v); });
    return t;
  }
  Tensor<float> t(Shape{static_cast<Index>(d.labels.size())});
  std::transform(d.labels.begin(), d.labels.end(), t.data(), [](int v) { return static_cast<float>(v); });
  return t;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_fit_target(Run& r) {
  const auto& c = r.cfg;
  const Dataset train_set = r.split(Split::train), test_set = r.split(Split::test);
  Rng rng(c.model.fit.seed);
  auto model = make_target_model<float>(c.model.arch, c.train.dataset.task, train_set.sample_shape(),
                                        c.train.dataset.num_classes, rng);
  TargetTrainConfig fit = c.model.fit;
  fit.augment_crop = c.train.dataset.augment_crop;
  fit.augment_flip = c.train.dataset.augment_flip;
  const auto losses = train_target_model(*model, train_set, fit);
  const fs::path path = r.dir / "target.bin";
  save_target_model(path, *model);
  std::vector<Index> all(static_cast<size_t>(test_set.size()));
  for (Index i = 0; i < test_set.size(); ++i) all[static_cast<size_t>(i)] = i;
  const double acc = mean_of(sample_scores(*model, test_set.images, test_set.labels_for(all)));
  write_text(r.dir / "fit.json", json{{"arch", c.model.arch}, {"model_id", model->model_id()}, {"epoch_loss", losses},
                                      {"test_accuracy", acc}}.dump(2) + "\n");
  r.say("model " + model->model_id() + " test accuracy " + fmt(acc));
  r.say(path.string());
  return kExitOk;
}

int cmd_train(Run& r, const std::string& resume) {
  if (r.cfg.train.target_model.empty()) throw ConfigError("model.path is required (train one with fit-target)");
  TrainHooks hooks;
  hooks.quiet = false;
  std::optional<fs::path> from;
  if (!resume.empty()) from = fs::path(resume);
  const auto res = train(r.cfg.train, r.dir, from, hooks);
  r.say("steps " + std::to_string(res.steps) + " params " + std::to_string(res.params_hash));
  r.say(res.checkpoint.string());
  return kExitOk;
}

int cmd_attack(Run& r) {
  auto target = r.target();
  auto sub = r.substitute();
  TargetModel<float>& source = sub ? *sub : *target;
  const Dataset data = r.split(Split::test);
  for (const auto& spec : r.cfg.eval.specs()) {
    const auto adv = adversarial_set(source, data, spec, r.cfg.eval.seed);
    const std::string name = attack_name(spec);
    Archive a;
    a.format = "purify-adversarial-v1";
    a.put("x_clean", data.images);
    a.put("x_adv", adv);
    a.put("labels", label_tensor(data));
    a.meta = {{"attack", attack_to_json(spec)}, {"source_model", source.model_id()}, {"seed", r.cfg.eval.seed}};
    const fs::path path = r.dir / ("adversarial-" + name + ".bin");
    a.save(path);
    json side = a.meta;
    side["samples"] = data.size();
    side["max_linf"] = (flatten_rows(adv) - flatten_rows(data.images)).cwiseAbs().maxCoeff();
    write_text(r.dir / ("adversarial-" + name + ".json"), side.dump(2) + "\n");
    r.say(path.string());
  }
  return kExitOk;
}

int cmd_eval(Run& r) {
  auto target = r.target();
  auto sub = r.substitute();
  const Dataset data = r.split(Split::test);
  EvalOptions opt;
  opt.seed = r.cfg.eval.seed;
  const auto specs = r.cfg.eval.specs();

  EvalReport rep;
  std::optional<LoadedGenerator> g;
  if (!r.cfg.eval.checkpoint.empty()) g = load_generator(r.cfg.eval.checkpoint);
  if (g && g->target_id != target->model_id()) {
    rep = model_transfer_eval(as_defense(*g->generator), g->target_id, *target, data, specs, sub.get(), opt);
  } else {
    Defense d;
    if (g) d = as_defense(*g->generator);
    rep = evaluate(*target, g ? &d : nullptr, data, specs, sub.get(), opt);
  }
  write_text(r.dir / "report.json", rep.to_json().dump(2) + "\n");
  write_text(r.dir / "report.csv", rep.to_csv());
  r.say("clean " + fmt(rep.clean_accuracy) +
        (rep.defended_clean_accuracy ? " defended-clean " + fmt(*rep.defended_clean_accuracy) : std::string()));
  for (const auto& a : rep.attacks)
    r.say(a.name + " undefended " + fmt(a.undefended_accuracy) +
          (a.defended_accuracy ? " defended " + fmt(*a.defended_accuracy) : std::string()) +
          (a.psnr ? " psnr " + fmt(*a.psnr, 2) : std::string()));
  r.say((r.dir / "report.json").string());
  if (!rep.invariants_ok()) {
    r.say("invariant re-check failed (epsilon ball or target parameter hash)");
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_proxy_a(Run& r, const std::string& set_a, const std::string& set_b) {
  const ProbeConfig probe = r.cfg.train.proxy.probe;
  json out;
  if (!set_a.empty() || !set_b.empty()) {
    if (set_a.empty() || set_b.empty()) throw ValidationError("--set-a and --set-b go together");
    const auto rep = proxy_a_distance(read_embeddings(set_a).features, read_embeddings(set_b).features, probe);
    out = {{"set_a", set_a}, {"set_b", set_b}, {"distance", rep.distance}, {"kappa", rep.kappa}};
    r.say("proxy-A " + fmt(rep.distance));
  } else {
    if (r.cfg.eval.checkpoint.empty()) throw ConfigError("proxy-a needs --set-a/--set-b or eval.checkpoint");
    auto target = r.target();
    auto g = load_generator(r.cfg.eval.checkpoint);
    const Dataset data = r.split(Split::test);
    const auto kind = r.cfg.train.proxy.embedding;
    const auto x_a = adversarial_set(*target, data, r.cfg.train.attack, r.cfg.eval.seed);
    const auto hat_c = purify_images(*g.generator, data.images), hat_a = purify_images(*g.generator, x_a);
    const auto emb = [&](const Tensor<float>& t) { return proxy_embed(kind, *target, t); };
    const auto e_c = emb(data.images), e_hat_a = emb(hat_a);
    out = {{"embedding", to_string(kind)},
           {"samples", data.size()},
           {"hat_a_vs_hat_c", proxy_a_distance(e_hat_a, emb(hat_c), probe).distance},
           {"hat_a_vs_c", proxy_a_distance(e_hat_a, e_c, probe).distance},
           {"a_vs_c", proxy_a_distance(emb(x_a), e_c, probe).distance}};
    r.say("proxy-A(x^a,x^c) " + fmt(out["hat_a_vs_hat_c"]) + " proxy-A(x^a,xc) " + fmt(out["hat_a_vs_c"]) +
          " proxy-A(xa,xc) " + fmt(out["a_vs_c"]));
  }
  write_text(r.dir / "proxy_a.json", out.dump(2) + "\n");
  return kExitOk;
}

int cmd_export_embed(Run& r, const std::string& images) {
  auto target = r.target();
  const Dataset data = r.split(Split::test);
  Tensor<float> x = data.images;
  if (images == "adversarial" || images == "purified") x = adversarial_set(*target, data, r.cfg.train.attack, r.cfg.eval.seed);
  if (images == "purified" || images == "purified-clean") {
    if (r.cfg.eval.checkpoint.empty()) throw ConfigError(images + " embeddings need eval.checkpoint");
    x = purify_images(*load_generator(r.cfg.eval.checkpoint).generator, x);
  }
  if (data.labels.empty()) throw UnsupportedTask("export-embed labels rows by class; classification datasets only");
  const fs::path path = r.dir / ("embeddings-" + images + ".csv");
  const auto res = export_embeddings(proxy_embed(ProxyEmbedding::target_features, *target, x), data.labels, path);
  if (res.empty_warning) r.say("warning: no rows to export");
  r.say(std::to_string(res.rows) + " rows, " + std::to_string(res.columns) + " columns");
  r.say(path.string());
  return kExitOk;
}

// Collects report.json files into one table.
int cmd_report(Run& r, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw ValidationError("report needs at least one run directory or report.json");
  std::ostringstream csv, md;
  csv << "source,mode,target,attack,clean,defended_clean,undefended,defended,psnr,p_value\n";
  md << "| source | mode | attack | clean | defended clean | undefended | defended | PSNR |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  auto opt = [](const json& j, const char* k, int digits = 4) {
    return j.contains(k) && !j[k].is_null() ? fmt(j[k].get<double>(), digits) : std::string("-");
  };
  for (const auto& in : inputs) {
    fs::path p = in;
    if (fs::is_directory(p)) p /= "report.json";
    std::ifstream f(p);
    if (!f) throw IoError("cannot read " + p.string());
    const json rep = json::parse(f);
    if (rep.value("schema", "") != kReportSchema) throw ValidationError(p.string() + " is not a " + kReportSchema + " report");
    for (const auto& a : rep.at("attacks")) {
      const std::string src = p.parent_path().filename().string();
      csv << src << ',' << rep.at("mode").get<std::string>() << ',' << rep.at("models").at("target").get<std::string>() << ','
          << a.at("name").get<std::string>() << ',' << opt(rep, "clean_accuracy") << ',' << opt(rep, "defended_clean_accuracy") << ','
          << opt(a, "undefended_accuracy") << ',' << opt(a, "defended_accuracy") << ',' << opt(a, "psnr") << ','
          << opt(a, "p_value", 6) << '\n';
      md << "| " << src << " | " << rep.at("mode").get<std::string>() << " | " << a.at("name").get<std::string>() << " | "
         << opt(rep, "clean_accuracy", 3) << " | " << opt(rep, "defended_clean_accuracy", 3) << " | " << opt(a, "undefended_accuracy", 3)
         << " | " << opt(a, "defended_accuracy", 3) << " | " << opt(a, "psnr", 2) << " |\n";
    }
  }
  write_text(r.dir / "summary.csv", csv.str());
  write_text(r.dir / "summary.md", md.str());
  r.say(md.str());
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial purification: train, attack, evaluate and diagnose purifier networks", "purify"};
  app.require_subcommand(1);
  Common common;
  std::string resume, set_a, set_b, images = "clean";
  std::vector<std::string> inputs;

  auto* fit = app.add_subcommand("fit-target", "Train a target network on the configured dataset");
  auto* tr = app.add_subcommand("train", "Train a purifier against model.path");
  auto* at = app.add_subcommand("attack", "Write an adversarial corpus for the test split");
  auto* ev = app.add_subcommand("eval", "Evaluate the target with and without the purifier");
  auto* px = app.add_subcommand("proxy-a", "Proxy-A distances between sample sets");
  auto* ex = app.add_subcommand("export-embed", "Export target-model feature vectors as CSV");
  auto* rp = app.add_subcommand("report", "Tabulate eval reports");
  for (auto* s : {fit, tr, at, ev, px, ex, rp}) add_common(s, common);
  tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  px->add_option("--set-a", set_a, "Embedding CSV")->check(CLI::ExistingFile);
  px->add_option("--set-b", set_b, "Embedding CSV")->check(CLI::ExistingFile);
  ex->add_option("--images", images, "clean, adversarial, purified or purified-clean")
      ->check(CLI::IsMember({"clean", "adversarial", "purified", "purified-clean"}))
      ->capture_default_str();
  rp->add_option("inputs", inputs, "Run directories or report.json files");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    Run r(common, sub->get_name(), sub->remaining(), out);
    try {
      if (sub == fit) return cmd_fit_target(r);
      if (sub == tr) return cmd_train(r, resume);
      if (sub == at) return cmd_attack(r);
      if (sub == ev) return cmd_eval(r);
      if (sub == px) return cmd_proxy_a(r, set_a, set_b);
      if (sub == ex) return cmd_export_embed(r, images);
      return cmd_report(r, inputs);
    } catch (const std::exception& e) {
      r.log(std::string("error: ") + e.what());
      throw;
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace purify::cli
