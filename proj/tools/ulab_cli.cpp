#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ulab/checkpoint.hpp"
#include "ulab/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ulab;
using namespace ulab::harness;

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "ulab-out";
  std::uint64_t seed = 1;
  double ratio = 0.05;
  std::string method = "GA";
  std::string attack = "exact";
  std::string selector = "topk";
  std::string world = "both";
  std::string run;
  std::string checkpoint;
  int iterations = -1;
  bool random = false;
};

const std::vector<std::string> kCorpusFiles{"train", "pretrain", "holdout", "pool"};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
  }
  fs::rename(tmp, p);
}

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw Error("missing " + p.string() + "; run " + producer + " first");
}

std::string percent(double ratio) {
  std::ostringstream s;
  s << ratio * 100;
  return s.str();
}

class Workspace {
 public:
  explicit Workspace(const Options& o) : root_(o.out_dir) {
    json j;
    if (!o.config_path.empty()) {
      std::ifstream in(o.config_path);
      if (!in) throw Error("config: cannot open " + o.config_path);
      j = json::parse(in, nullptr, true, true);
    } else if (fs::exists(root_ / "config.json")) {
      j = json::parse(read_file(root_ / "config.json"));
    } else {
      j = config_to_json(default_config());
    }
    for (const auto& a : o.overrides) apply_override(j, a);
    cfg_ = config_from_json(j);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& root() const { return root_; }

  const WorldConfig& world_config(const std::string& name) const {
    if (name == "victim") return cfg_.victim;
    if (name == "surrogate") return cfg_.surrogate;
    throw Error("unknown world '" + name + "' (victim or surrogate)");
  }

  fs::path data_dir(const std::string& name) const { return root_ / "data" / name; }
  fs::path model_path(const std::string& name) const { return root_ / "models" / (name + ".ulab"); }
  fs::path targets_path(std::uint64_t seed) const {
    return root_ / "targets" / ("seed-" + std::to_string(seed) + ".jsonl");
  }
  fs::path run_dir(const std::string& name) const { return root_ / "runs" / name; }

  /// Corpora from disk, checked against the current config.
  World load_data(const std::string& name) const {
    const auto dir = data_dir(name);
    require(dir / "record.json", "`ulab gen-data`");
    const auto rec = json::parse(read_file(dir / "record.json"));
    const auto& wc = world_config(name);
    if (rec.at("world_fingerprint") != world_fingerprint(wc)) {
      throw Error(dir.string() + " was generated for a different config; run `ulab gen-data` first");
    }
    World w;
    w.config = wc;
    const auto lexicon = synth::lexicon_from_json(read_file(dir / "lexicon.json"));
    const std::vector<const synth::CorpusSpec*> specs{&wc.train, &wc.pretrain, &wc.holdout, &wc.pool};
    const std::vector<synth::Corpus*> corpora{&w.train, &w.pretrain, &w.holdout, &w.pool};
    for (std::size_t i = 0; i < corpora.size(); ++i) {
      corpora[i]->id = specs[i]->corpus_id;
      corpora[i]->lexicon = lexicon;
      corpora[i]->examples = synth::corpus_from_jsonl(read_file(dir / (kCorpusFiles[i] + ".jsonl")));
    }
    for (const auto& e : w.train.examples) w.train_seqs.push_back(e.packed());
    for (const auto& e : w.holdout.examples) w.holdout_seqs.push_back(e.packed());
    return w;
  }

  World load_world(const std::string& name) const {
    World w = load_data(name);
    const auto path = model_path(name);
    require(path, "`ulab train --world " + name + "`");
    const auto rec = json::parse(read_file(root_ / "models" / (name + ".json")));
    if (rec.at("world_fingerprint") != world_fingerprint(w.config)) {
      throw Error(path.string() + " was trained for a different config; run `ulab train` first");
    }
    w.theta = lm::load_checkpoint<float>(path, w.config.model);
    return w;
  }

  std::vector<attack::AttackTarget> load_targets(std::uint64_t seed) const {
    const auto path = targets_path(seed);
    require(path, "`ulab select-targets --seed " + std::to_string(seed) + "`");
    return attack::targets_from_jsonl(read_file(path));
  }

  void save_run(const std::string& name, const AttackRun& run) const {
    const auto dir = run_dir(name);
    fs::create_directories(dir);
    lm::save_checkpoint(dir / "unlearned.ulab", run.unlearned);
    write_file(dir / "selection.json", select::selection_to_json(run.selection));
    if (run.suffix) write_file(dir / "suffix.json", gcg::suffix_to_json(*run.suffix));
    write_file(dir / "metrics.json", eval::metric_report_to_json(run.metrics));
    auto rec = run_record(run, config_fingerprint(cfg_), (dir / "unlearned.ulab").string());
    rec["name"] = name;
    write_file(dir / "record.json", rec.dump(2));
    std::cout << name << ": " << csv_row(run) << '\n';
  }

 private:
  fs::path root_;
  ExperimentConfig cfg_;
};

std::vector<std::string> worlds_of(const std::string& w) {
  if (w == "both") return {"victim", "surrogate"};
  return {w};
}

// ---------------------------------------------------------------- subcommands

void cmd_gen_data(const Options& o) {
  Workspace ws(o);
  write_file(ws.root() / "config.json", config_to_json(ws.config()).dump(2));
  for (const auto& name : worlds_of(o.world)) {
    const auto w = generate_world(ws.world_config(name));
    const auto dir = ws.data_dir(name);
    const std::vector<const synth::Corpus*> corpora{&w.train, &w.pretrain, &w.holdout, &w.pool};
    json rec{{"world_fingerprint", world_fingerprint(w.config)}, {"corpora", json::object()}};
    for (std::size_t i = 0; i < corpora.size(); ++i) {
      const auto text = synth::corpus_to_jsonl(*corpora[i]);
      write_file(dir / (kCorpusFiles[i] + ".jsonl"), text);
      rec["corpora"][kCorpusFiles[i]] = {{"examples", corpora[i]->examples.size()},
                                         {"fingerprint", lm::fingerprint(text)}};
    }
    write_file(dir / "lexicon.json", synth::lexicon_to_json(w.train.lexicon));
    write_file(dir / "record.json", rec.dump(2));
    std::cout << name << ": " << w.train.examples.size() << " train, " << w.pretrain.examples.size()
              << " pretrain, " << w.holdout.examples.size() << " holdout, " << w.pool.examples.size() << " pool\n";
  }
}

void cmd_train(const Options& o) {
  Workspace ws(o);
  for (const auto& name : worlds_of(o.world)) {
    const auto w = ws.load_data(name);
    const auto theta = train_world(w);
    const auto bytes = lm::serialize(theta);
    write_file(ws.model_path(name), bytes);
    const double ppl = eval::retain_utility(theta, w.holdout_seqs);
    json rec{{"world_fingerprint", world_fingerprint(w.config)},
             {"checkpoint_fingerprint", lm::fingerprint(bytes)},
             {"parameters", theta.count()},
             {"holdout_ppl", ppl}};
    write_file(ws.root() / "models" / (name + ".json"), rec.dump(2));
    std::cout << name << ": checkpoint " << lm::fingerprint(bytes) << ", holdout perplexity " << ppl << '\n';
  }
}

void cmd_select_targets(const Options& o) {
  Workspace ws(o);
  const auto& c = ws.config();
  const auto w = ws.load_world("victim");
  const auto targets = select_targets(w, c.target_count, c.beta, c.lambda, o.seed);
  write_file(ws.targets_path(o.seed), attack::targets_to_jsonl(targets));
  std::cout << "seed " << o.seed << ": " << targets.size() << " targets\n";
}

attack::ObjectiveKind objective_of(const std::string& attack) {
  if (attack == "exact") return attack::ObjectiveKind::FlipWithCoherentTrace;
  if (attack == "adv") throw Error("--attack adv is run by `ulab attack-adv`");
  return attack::parse_objective(attack);
}

void cmd_attack_exact(const Options& o) {
  Workspace ws(o);
  const auto w = ws.load_world("victim");
  const auto targets = ws.load_targets(o.seed);
  const auto base = baseline(w, targets);
  const auto selector = parse_selector(o.selector);
  const auto run = run_exact_attack(w, base, targets, ws.config(), o.ratio, unlearn::parse_method(o.method), o.seed,
                                    selector, objective_of(o.attack));
  const std::string sel = selector == Selector::Relaxed ? "-relaxed" : "";
  ws.save_run(run.attack + sel + "-" + run.method + "-r" + percent(o.ratio) + "-s" + std::to_string(o.seed), run);
}

void cmd_attack_adv(const Options& o) {
  Workspace ws(o);
  const auto w = ws.load_world("victim");
  const auto targets = ws.load_targets(o.seed);
  const auto base = baseline(w, targets);
  const int iters = o.iterations >= 0 ? o.iterations : ws.config().gcg.iterations;
  const auto run =
      run_adversarial_attack(w, base, targets, ws.config(), o.ratio, unlearn::parse_method(o.method), o.seed, iters);
  ws.save_run(run.attack + "-" + run.method + "-r" + percent(o.ratio) + "-s" + std::to_string(o.seed), run);
}

void cmd_transfer(const Options& o) {
  Workspace ws(o);
  const auto victim = ws.load_world("victim");
  const auto surrogate = ws.load_world("surrogate");
  const auto targets = ws.load_targets(o.seed);
  const auto base = baseline(victim, targets);
  const auto run = run_transfer_attack(victim, base, surrogate, targets, ws.config(), o.ratio,
                                       unlearn::parse_method(o.method), o.seed, o.random);
  ws.save_run(run.attack + "-" + run.method + "-r" + percent(o.ratio) + "-s" + std::to_string(o.seed), run);
}

json load_record(const Workspace& ws, const std::string& run) {
  if (run.empty()) throw Error("--run is required");
  const auto path = ws.run_dir(run) / "record.json";
  require(path, "`ulab attack-exact`, `ulab attack-adv` or `ulab transfer`");
  return json::parse(read_file(path));
}

void cmd_unlearn(const Options& o) {
  Workspace ws(o);
  const auto rec = load_record(ws, o.run);
  const auto dir = ws.run_dir(o.run);
  const auto sel = select::selection_from_json(read_file(dir / "selection.json"));
  const auto victim = ws.load_world("victim");
  const bool from_surrogate = sel.corpus_id != victim.train.id;
  const World source = from_surrogate ? ws.load_data("surrogate") : victim;

  std::vector<synth::ReasoningExample> chosen;
  std::vector<char> mark(source.train.examples.size(), 0);
  for (auto i : sel.indices) {
    chosen.push_back(source.train.examples.at(i));
    mark[i] = 1;
  }
  std::vector<lm::PackedSequence> forget;
  if (fs::exists(dir / "suffix.json")) {
    const auto suffix = gcg::suffix_from_json(read_file(dir / "suffix.json"));
    forget = gcg::perturbed_forget_set(chosen, suffix.delta, suffix.config.placement);
  } else {
    for (const auto& e : chosen) forget.push_back(e.packed());
  }
  std::vector<lm::PackedSequence> retain;
  for (std::size_t i = 0; i < victim.train_seqs.size(); ++i) {
    const auto& s = victim.train_seqs[i];
    const bool submitted =
        from_surrogate ? std::any_of(forget.begin(), forget.end(), [&](const auto& f) { return f.tokens == s.tokens; })
                       : static_cast<bool>(mark[i]);
    if (!submitted) retain.push_back(s);
  }
  const auto method = unlearn::parse_method(o.method);
  const auto seed = rec.at("seed").get<std::uint64_t>();
  const auto theta = unlearn::unlearn(victim.theta, forget, retain, ws.config().unlearn_for(method, seed));
  const auto out = o.checkpoint.empty() ? dir / ("unlearned-" + o.method + ".ulab") : fs::path(o.checkpoint);
  const auto bytes = lm::serialize(theta);
  write_file(out, bytes);
  std::cout << out.string() << ": " << lm::fingerprint(bytes);
  if (method == unlearn::parse_method(rec.at("unlearn_method").get<std::string>())) {
    std::cout << (lm::fingerprint(bytes) == rec.at("checkpoint_fingerprint") ? " (matches the recorded run)"
                                                                              : " (DIFFERS from the recorded run)");
  }
  std::cout << '\n';
}

void cmd_evaluate(const Options& o) {
  Workspace ws(o);
  const auto rec = load_record(ws, o.run);
  const auto dir = ws.run_dir(o.run);
  const auto ckpt = o.checkpoint.empty() ? dir / "unlearned.ulab" : fs::path(o.checkpoint);
  require(ckpt, "`ulab unlearn --run " + o.run + "`");
  const auto victim = ws.load_world("victim");
  const auto seed = rec.at("seed").get<std::uint64_t>();
  const auto targets = ws.load_targets(seed);
  const auto theta = lm::load_checkpoint<float>(ckpt, victim.config.model);
  const auto m = evaluate(victim, baseline(victim, targets), theta, targets, ws.config().beta);
  const auto out = dir / ("metrics-" + ckpt.stem().string() + ".json");
  write_file(out, eval::metric_report_to_json(m));
  std::cout << out.string() << ": asr " << m.asr << ", answer PPR " << m.ppr_answer << ", trace PDR " << m.pdr_trace
            << ", retain ppl " << m.retain_ppl_before << " -> " << m.retain_ppl_after << '\n';
}

// ---------------------------------------------------------------- report

struct Cell {
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  double mean() const {
    double s = 0;
    for (double v : values) s += v;
    return values.empty() ? 0 : s / static_cast<double>(values.size());
  }
  std::string list() const {
    std::ostringstream s;
    s.precision(6);
    for (std::size_t i = 0; i < values.size(); ++i) s << (i ? ";" : "") << values[i];
    return s.str();
  }
};

using Key = std::tuple<std::string, std::string, double>;  // attack, method, ratio

void cmd_report(const Options& o) {
  Workspace ws(o);
  const auto runs = ws.root() / "runs";
  if (!fs::exists(runs)) throw Error("no runs under " + runs.string() + "; run `ulab attack-exact` first");
  std::vector<json> records;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(runs)) {
    if (fs::exists(entry.path() / "record.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) records.push_back(json::parse(read_file(d / "record.json")));
  if (records.empty()) throw Error("no run records under " + runs.string() + "; run `ulab attack-exact` first");

  const auto out = ws.root() / "report";
  std::ostringstream csv;
  csv.precision(17);
  csv << eval::kCsvHeader << '\n';
  std::map<Key, std::map<std::string, Cell>> cells;
  for (const auto& r : records) {
    const auto& m = r.at("metrics");
    const Key key{r.at("attack"), r.at("unlearn_method"), r.at("ratio")};
    csv << r.at("seed").get<std::uint64_t>() << ',' << r.at("attack").get<std::string>() << ','
        << r.at("unlearn_method").get<std::string>() << ',' << r.at("ratio").get<double>() << ','
        << m.at("asr").get<double>() << ',' << m.at("ppr_answer").get<double>() << ','
        << m.at("pdr_trace").get<double>() << ',' << m.at("retain_ppl_before").get<double>() << ','
        << m.at("retain_ppl_after").get<double>() << '\n';
    for (const char* f : {"asr", "ppr_answer", "pdr_trace", "ppr_trace", "pdr_answer"}) {
      auto& c = cells[key][f];
      c.values.push_back(m.at(f).get<double>());
      c.seeds.push_back(r.at("seed").get<std::uint64_t>());
    }
  }
  write_file(out / "results.csv", csv.str());
  write_file(out / "results.json", json(records).dump(2));

  auto table = [&](const std::string& file, const std::vector<std::string>& attacks,
                   const std::vector<std::string>& fields) {
    std::ostringstream t;
    t.precision(6);
    t << "attack,unlearn_method,ratio,n_seeds";
    for (const auto& f : fields) t << ',' << f << "_mean," << f << "_per_seed";
    t << '\n';
    for (const auto& [key, byfield] : cells) {
      const auto& [attack, method, ratio] = key;
      if (std::find(attacks.begin(), attacks.end(), attack) == attacks.end()) continue;
      t << attack << ',' << method << ',' << ratio << ',' << byfield.at(fields[0]).values.size();
      for (const auto& f : fields) t << ',' << byfield.at(f).mean() << ',' << byfield.at(f).list();
      t << '\n';
    }
    write_file(out / file, t.str());
  };
  table("asr_vs_ratio.csv", {"random", "exact", "adv", "adv-random"}, {"asr"});
  table("degrade_vs_ratio.csv", {"degrade", "degrade-random"}, {"pdr_trace", "ppr_answer", "ppr_trace"});
  table("answer_only_pdr.csv", {"answer-only", "answer-only-random"}, {"pdr_answer", "ppr_trace"});

  // Transfer matrix: source world -> victim, raw and normalized by the largest mean.
  std::ostringstream t;
  t.precision(6);
  t << "source,target,attack,unlearn_method,ratio,n_seeds,asr_mean,asr_max_normalized\n";
  double peak = 0;
  std::vector<std::pair<Key, double>> rows;
  for (const auto& [key, byfield] : cells) {
    const auto& attack = std::get<0>(key);
    if (attack != "transfer" && attack != "transfer-random" && attack != "exact" && attack != "random") continue;
    rows.emplace_back(key, byfield.at("asr").mean());
    peak = std::max(peak, rows.back().second);
  }
  for (const auto& [key, asr] : rows) {
    const auto& [attack, method, ratio] = key;
    const bool cross = attack.rfind("transfer", 0) == 0;
    t << (cross ? "surrogate" : "victim") << ",victim," << attack << ',' << method << ',' << ratio << ','
      << cells[key]["asr"].values.size() << ',' << asr << ',' << (peak > 0 ? asr / peak : 0.0) << '\n';
  }
  write_file(out / "transfer_matrix.csv", t.str());
  std::cout << records.size() << " runs -> " << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unlearning-attack lab on a synthetic reasoning task"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config (default: <out-dir>/config.json, else built-in)");
    sub->add_option("--override", o.overrides, "key.path=value, repeatable");
    sub->add_option("--out-dir", o.out_dir, "Artifact directory")->capture_default_str();
  };
  auto seeded = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "Experiment seed")->capture_default_str(); };
  auto attack_opts = [&](CLI::App* sub) {
    seeded(sub);
    sub->add_option("--ratio", o.ratio, "Unlearning ratio |D_f| / |D_tr|")->capture_default_str();
    sub->add_option("--method", o.method, "Unlearning method: GA, GA_GD, GA_KL, RMU")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "Generate corpora and the lexicon");
  common(gen);
  gen->add_option("--world", o.world, "victim, surrogate or both")->capture_default_str();
  auto* train = app.add_subcommand("train", "Pretrain and fine-tune a world's model");
  common(train);
  train->add_option("--world", o.world, "victim, surrogate or both")->capture_default_str();
  auto* targets = app.add_subcommand("select-targets", "Pick correctly and coherently decoded targets");
  common(targets);
  seeded(targets);
  auto* exact = app.add_subcommand("attack-exact", "Select genuine training samples and unlearn them");
  common(exact);
  attack_opts(exact);
  exact->add_option("--attack", o.attack, "exact, degrade or answer-only")->capture_default_str();
  exact->add_option("--selector", o.selector, "topk, relaxed or random")->capture_default_str();
  auto* adv = app.add_subcommand("attack-adv", "Append an optimized suffix to the selected samples, then unlearn");
  common(adv);
  attack_opts(adv);
  adv->add_option("--attack", o.attack, "Only 'adv' is accepted here");
  adv->add_option("--iterations", o.iterations, "Suffix search steps (0: random suffix; default from config)");
  auto* transfer = app.add_subcommand("transfer", "Select on the surrogate world, unlearn on the victim");
  common(transfer);
  attack_opts(transfer);
  transfer->add_flag("--random", o.random, "Random auxiliary samples instead of the surrogate's top-k");
  auto* unl = app.add_subcommand("unlearn", "Re-apply unlearning from a run's selection and suffix");
  common(unl);
  unl->add_option("--run", o.run, "Run directory name under <out-dir>/runs")->required();
  unl->add_option("--method", o.method, "Unlearning method")->capture_default_str();
  unl->add_option("--checkpoint", o.checkpoint, "Output checkpoint path");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a run's targets");
  common(ev);
  ev->add_option("--run", o.run, "Run directory name under <out-dir>/runs")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint to score (default: the run's own)");
  auto* rep = app.add_subcommand("report", "Aggregate run records into CSV, JSON and summary tables");
  common(rep);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) cmd_gen_data(o);
    if (*train) cmd_train(o);
    if (*targets) cmd_select_targets(o);
    if (*exact) cmd_attack_exact(o);
    if (*adv) {
      if (o.attack != "exact" && o.attack != "adv") throw Error("attack-adv only runs --attack adv");
      cmd_attack_adv(o);
    }
    if (*transfer) cmd_transfer(o);
    if (*unl) cmd_unlearn(o);
    if (*ev) cmd_evaluate(o);
    if (*rep) cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
