/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fwmark/attack.hpp"
#include "fwmark/checkpoint.hpp"
#include "fwmark/data.hpp"
#include "fwmark/model.hpp"
#include "fwmark/train.hpp"
#include "fwmark/watermark.hpp"

namespace fwmark::cli {

using nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kVerificationFailed = 2,
  kConvergence = 3,
  kIoFormat = 4,
  kConfig = 5,
};

// ---------------------------------------------------------------------------
// Run configuration

struct OptionSpec {
  std::string key;  // file key; the flag is --key with '_' -> '-'
  json def;         // typed default; a string default "" means unset
  std::string help;
};

inline std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

// Converts `v` to the JSON type of `def`.
inline json coerce(const json& def, const json& v, const std::string& key) {
  try {
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      std::size_t used = 0;
      if (def.is_boolean()) return parse_bool(s, key);
      if (def.is_number_unsigned()) {
        if (s.empty() || s[0] == '-') throw std::invalid_argument(s);
        const std::uint64_t u = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return u;
      }
      if (def.is_number()) {
        const double d = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return d;
      }
      return s;
    }
    if (def.is_string()) {
      if (v.is_array()) {
        std::string joined;
        for (const auto& e : v) {
          if (!joined.empty()) joined += ',';
          joined += e.is_string() ? e.get<std::string>() : e.dump();
        }
        return joined;
      }
      if (v.is_number() || v.is_boolean()) return v.dump();
    }
    if (def.is_boolean() && v.is_boolean()) return v;
    if (def.is_number_unsigned()) {
      if (v.is_number_unsigned()) return v;
      if (v.is_number_integer() && v.get<std::int64_t>() >= 0)
        return v.get<std::uint64_t>();
    } else if (def.is_number() && v.is_number()) {
      return v.get<double>();
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": cannot use " + v.dump() + " here");
}

// Flat key=value lines ('#' comments) or a JSON object.
inline json parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw ConfigError("config file is not a valid JSON object");
    return j;
  }
  json j = json::object();
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(no) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto l = s.find_first_not_of(" \t\r");
      const auto r = s.find_last_not_of(" \t\r");
      return l == std::string::npos ? std::string() : s.substr(l, r - l + 1);
    };
    j[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return j;
}

// Resolved, typed settings of one command.
class RunConfig {
 public:
  RunConfig(std::string command, const std::vector<OptionSpec>& specs)
      : command_(std::move(command)) {
    for (const auto& s : specs) values_[s.key] = s.def;
  }

  const std::string& command() const { return command_; }
  const json& values() const { return values_; }

  void set(const std::string& key, const json& v) {
    if (key == "command") {
      if (!v.is_string() || v.get<std::string>() != command_)
        throw ConfigError("config file is for command " + v.dump() +
                          ", not '" + command_ + "'");
      return;
    }
    if (!values_.contains(key))
      throw ConfigError("unknown setting '" + key + "' for " + command_);
    values_[key] = coerce(values_[key], v, key);
  }

  void merge(const json& obj) {
    for (const auto& [k, v] : obj.items()) set(k, v);
  }

  bool has(const std::string& key) const {
    return values_.contains(key) &&
           !(values_[key].is_string() && values_[key].get<std::string>().empty());
  }
  std::string str(const std::string& key) const { return at(key).get<std::string>(); }
  std::string required(const std::string& key) const {
    if (!has(key)) throw ConfigError(command_ + " needs " + flag_name(key));
    return str(key);
  }
  double num(const std::string& key) const { return at(key).get<double>(); }
  std::uint64_t u64(const std::string& key) const {
    return at(key).get<std::uint64_t>();
  }
  std::size_t size(const std::string& key) const {
    return static_cast<std::size_t>(u64(key));
  }
  bool flag(const std::string& key) const { return at(key).get<bool>(); }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream in(str(key));
    for (std::string item; std::getline(in, item, ',');) {
      const auto l = item.find_first_not_of(' ');
      const auto r = item.find_last_not_of(' ');
      if (l != std::string::npos) out.push_back(item.substr(l, r - l + 1));
    }
    return out;
  }
  std::vector<float> float_list(const std::string& key) const {
    std::vector<float> out;
    for (const auto& s : list(key)) out.push_back(float(coerce(0.0, s, key).get<double>()));
    return out;
  }

  json resolved() const {
    json j = values_;
    j["command"] = command_;
    return j;
  }

 private:
  const json& at(const std::string& key) const {
    if (!values_.contains(key)) throw ConfigError("no setting '" + key + "'");
    return values_[key];
  }

  std::string command_;
  json values_ = json::object();
};

// ---------------------------------------------------------------------------
// Option groups

inline void append(std::vector<OptionSpec>& to, std::vector<OptionSpec> from) {
  for (auto& s : from) to.push_back(std::move(s));
}

inline std::vector<OptionSpec> data_options() {
  return {
      {"data", "synthetic", "'synthetic' or a directory with IDX train files"},
      {"classes", 10u, "synthetic: number of classes"},
      {"per_class", 200u, "synthetic: samples per class"},
      {"image_size", 16u, "synthetic: image height and width"},
      {"channels", 1u, "synthetic: image channels"},
      {"noise", 0.35, "synthetic: per-sample noise level"},
      {"split", 0.5, "fraction of samples used for training"},
  };
}

inline std::vector<OptionSpec> train_options(const std::string& p) {
  return {
      {p + "epochs", 5u, "classifier training epochs"},
      {p + "batch", 32u, "classifier mini-batch size"},
      {p + "optimizer", "adam", "sgd or adam"},
      {p + "lr", 1e-3, "classifier learning rate"},
      {p + "momentum", 0.9, "SGD momentum"},
  };
}

inline std::vector<OptionSpec> generator_options(const std::string& p) {
  return {
      {"n", std::uint64_t(kDefaultTriggers), "number of trigger images"},
      {"a", 200.0, "variance weight a"},
      {p + "epochs", 300u, "generator training epochs"},
      {p + "optimizer", "adam", "sgd or adam"},
      {p + "lr", 1e-3, "generator learning rate"},
  };
}

inline std::vector<OptionSpec> fine_tune_options(const std::string& p,
                                                 const std::string& mode) {
  return {
      {p + "mode", mode, "full or last_layer"},
      {p + "epochs", 60u, "fine-tuning epochs"},
      {p + "batch", 32u, "fine-tuning mini-batch size"},
      {p + "optimizer", "sgd", "sgd or adam"},
      {p + "lr", 1e-3, "fine-tuning learning rate"},
      {p + "momentum", 0.9, "SGD momentum"},
      {"poison_fraction", 0.1, "fraction of training samples copied as BIM poison"},
      {"bim_epsilon", 0.1, "BIM L-infinity budget"},
      {"bim_alpha", 0.025, "BIM step size"},
      {"bim_iterations", 10u, "BIM iterations"},
      {"bim_targeted", true, "poison labels (y+1) mod M instead of y"},
  };
}

inline OptimizerConfig optimizer_from(const RunConfig& c, const std::string& p) {
  OptimizerConfig o;
  o.rule = parse_optim_rule(c.str(p + "optimizer"));
  o.lr = float(c.num(p + "lr"));
  if (c.values().contains(p + "momentum")) o.momentum = float(c.num(p + "momentum"));
  if (!(o.lr >= 0)) throw ConfigError(flag_name(p + "lr") + " must be >= 0");
  return o;
}

inline TrainConfig train_config_from(const RunConfig& c, const std::string& p) {
  TrainConfig t;
  t.epochs = c.size(p + "epochs");
  t.batch = c.size(p + "batch");
  t.optimizer = optimizer_from(c, p);
  t.seed = c.u64("seed");
  if (t.batch == 0) throw ConfigError("batch size must be >= 1");
  return t;
}

inline FragileLossConfig generator_config_from(const RunConfig& c,
                                               const std::string& p) {
  FragileLossConfig f;
  if (c.values().contains("a")) f.a = float(c.num("a"));
  f.epochs = c.size(p + "epochs");
  f.optimizer = optimizer_from(c, p);
  return f;
}

inline FineTuneConfig fine_tune_config_from(const RunConfig& c,
                                            const std::string& p) {
  FineTuneConfig f;
  f.mode = parse_fine_tune_mode(c.str(p + "mode"));
  f.epochs = c.size(p + "epochs");
  f.batch = c.size(p + "batch");
  f.optimizer = optimizer_from(c, p);
  f.poison_fraction = c.num("poison_fraction");
  f.seed = c.u64("seed");
  if (f.batch == 0) throw ConfigError("batch size must be >= 1");
  f.validate();
  return f;
}

inline BimConfig bim_config_from(const RunConfig& c) {
  BimConfig b;
  b.epsilon = float(c.num("bim_epsilon"));
  b.alpha = float(c.num("bim_alpha"));
  b.iterations = c.size("bim_iterations");
  b.targeted = c.flag("bim_targeted");
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Data provenance

inline json data_spec_from(const RunConfig& c) {
  return {{"source", c.str("data")},
          {"classes", c.u64("classes")},
          {"per_class", c.u64("per_class")},
          {"image_size", c.u64("image_size")},
          {"channels", c.u64("channels")},
          {"noise", c.num("noise")},
          {"split", c.num("split")},
          {"seed", c.u64("seed")}};
}

// Rebuilds the (train, test) split a checkpoint was trained on.
inline std::pair<Dataset, Dataset> load_split(const json& spec) {
  Dataset all;
  try {
    const std::string source = spec.at("source").get<std::string>();
    const std::uint64_t seed = spec.at("seed").get<std::uint64_t>();
    if (source == "synthetic") {
      const std::size_t size = spec.at("image_size").get<std::size_t>();
      all = synth_blobs(spec.at("classes").get<std::size_t>(),
                        spec.at("per_class").get<std::size_t>(),
                        Shape{spec.at("channels").get<std::size_t>(), size, size},
                        seed, spec.at("noise").get<double>());
    } else {
      if (!fs::is_directory(source))
        throw IoError("dataset directory not found: " + source);
      all = load_idx_dir(source);
    }
    return split(all, spec.at("split").get<double>(), seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("incomplete data description: ") + e.what());
  }
}

inline std::pair<Dataset, Dataset> checkpoint_split(const Model& m) {
  if (!m.metadata().contains("data"))
    throw ConfigError("checkpoint carries no data description; retrain it "
                      "with 'fwmark train'");
  return load_split(m.metadata()["data"]);
}

// ---------------------------------------------------------------------------
// Output staging: nothing is written unless the command succeeds.

class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& dir() const { return dir_; }
  void input(const fs::path& p) { inputs_.push_back(p); }
  void bytes(const std::string& name, std::vector<std::uint8_t> b) {
    files_.emplace_back(name, std::move(b));
  }
  void text(const std::string& name, const std::string& s) {
    files_.emplace_back(name, std::vector<std::uint8_t>(s.begin(), s.end()));
  }
  void json_file(const std::string& name, const json& j) {
    text(name, j.dump(2) + "\n");
  }

  void commit() const {
    for (const auto& [name, _] : files_)
      for (const auto& in : inputs_) {
        std::error_code ec;
        if (fs::exists(dir_ / name) && fs::equivalent(dir_ / name, in, ec))
          throw ConfigError("refusing to overwrite input file " + in.string());
      }
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
    for (const auto& [name, b] : files_) write_file(dir_ / name, b);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& f : files_) out.push_back(f.first);
    return out;
  }

 private:
  fs::path dir_;
  std::vector<fs::path> inputs_;
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files_;
};

inline std::string utc_now() {
  const std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline json nan_to_null(double v) { return std::isnan(v) ? json() : json(v); }

// ---------------------------------------------------------------------------
// Commands

struct Command {
  std::string name;
  std::string help;
  bool stochastic = true;
  std::vector<OptionSpec> options;
  int (*run)(RunConfig&, Outputs&, std::ostream&) = nullptr;
};

inline int cmd_train(RunConfig& c, Outputs& out, std::ostream& log) {
  const json spec = data_spec_from(c);
  auto [train, test] = load_split(spec);
  log << "data: " << spec["source"].get<std::string>() << ", " << train.size()
      << " train / " << test.size() << " test, " << train.classes << " classes\n";
  ClassifierModel m = build_classifier(c.str("arch"), train.sample_shape(),
                                       train.classes, c.u64("seed"));
  const TrainConfig tc = train_config_from(c, "");
  const TrainReport rep = train_classifier(m, train, tc);
  m.metadata()["data"] = spec;
  m.metadata()["train"] = tc;
  const double test_acc = accuracy(m, test);
  const std::string hash = parameter_hash_hex(m);
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
    log << "epoch " << e + 1 << " loss " << fixed(rep.epoch_loss[e]) << '\n';
  log << "train accuracy: " << fixed(rep.train_accuracy) << '\n'
      << "test accuracy: " << fixed(test_acc) << '\n'
      << "parameter hash: " << hash << '\n';

  out.bytes("classifier.fwm", serialize_model(m));
  out.json_file("metrics.json", {{"arch", m.arch()},
                                 {"classes", m.classes()},
                                 {"parameters", m.param_count()},
                                 {"epoch_loss", rep.epoch_loss},
                                 {"train_accuracy", rep.train_accuracy},
                                 {"test_accuracy", test_acc},
                                 {"parameter_hash", hash}});
  return kOk;
}

inline int cmd_watermark(RunConfig& c, Outputs& out, std::ostream& log) {
  const fs::path ckpt = c.required("checkpoint");
  out.input(ckpt);
  const Digest file_before = sha256(read_file(ckpt));
  const ClassifierModel m = load_classifier(ckpt);
  const Digest before = parameter_hash(m);
  auto [train, test] = checkpoint_split(m);
  const double acc_before = accuracy(m, test);

  if (!c.has("created")) c.set("created", utc_now());
  const SecretKey key = make_secret_key(c.size("n"), m.classes(), c.u64("seed"));
  for (const auto& w : key.warnings) log << "warning: " << w << '\n';
  const FragileLossConfig fc = generator_config_from(c, "");
  GeneratorModel g = build_generator(m.input_shape(), mix_seed(c.u64("seed"), 0x6e));

  GeneratorRun run;
  try {
    run = train_generator(g, m, key, fc);
  } catch (const ConvergenceError& e) {
    log << "error: " << e.what() << "\nfinal AccTri: " << e.acc_tri()
        << "\nloss tail:";
    for (float l : e.loss_tail()) log << ' ' << l;
    log << '\n';
    throw;
  }

  TriggerProvenance prov;
  prov.classifier_hash = to_hex(before);
  prov.a = fc.a;
  prov.epochs = fc.epochs;
  prov.include_ce = fc.include_ce;
  prov.loss_tail = run.loss_tail();
  prov.created = c.str("created");
  const TriggerSet ts = materialize_triggers(g, key, prov);
  const VerificationReport v = acc_tri(m, ts);
  if (!v.intact)
    throw ContractError("materialized triggers do not reproduce the key");

  const double acc_after = accuracy(m, test);
  const bool unchanged = parameter_hash(m) == before &&
                         sha256(read_file(ckpt)) == file_before;
  if (!unchanged) throw ContractError("watermarking changed the classifier");
  const double diff = acc_after - acc_before;

  log << "AccTri: " << fixed(v.acc_tri) << " (" << v.matches << "/" << v.n << ")\n"
      << "classifier hash: " << to_hex(before) << " (unchanged)\n"
      << "test accuracy before: " << fixed(acc_before, 6)
      << ", after: " << fixed(acc_after, 6) << ", difference: " << diff << '\n';

  out.bytes("triggers.fwts", serialize_triggers(ts));
  out.bytes("generator.fwm", serialize_model(g));
  out.json_file("watermark_report.json",
                {{"acc_tri", v.acc_tri},
                 {"n", key.n},
                 {"classes", key.classes},
                 {"a", fc.a},
                 {"epochs", fc.epochs},
                 {"loss_tail", run.loss_tail()},
                 {"classifier_hash_before", to_hex(before)},
                 {"classifier_hash_after", parameter_hash_hex(m)},
                 {"hash_unchanged", unchanged},
                 {"test_accuracy_before", acc_before},
                 {"test_accuracy_after", acc_after},
                 {"accuracy_difference", diff},
                 {"warnings", key.warnings}});
  return kOk;
}

inline int cmd_verify(RunConfig& c, Outputs& out, std::ostream& log) {
  const fs::path trig = c.required("triggers"), ckpt = c.required("checkpoint");
  out.input(trig);
  out.input(ckpt);
  const TriggerSet ts = load_triggers(trig);  // integrity before inference
  const ClassifierModel m = load_classifier(ckpt);
  const VerificationReport v = acc_tri(m, ts);
  log << "AccTri: " << fixed(v.acc_tri) << " (" << v.matches << "/" << v.n << ")\n"
      << "verdict: " << (v.intact ? "intact" : "modified") << '\n';
  if (!v.manifest_hash_matches)
    log << "note: classifier hash differs from the one recorded at watermarking\n";
  out.json_file("verify_report.json", v);
  return v.intact ? kOk : kVerificationFailed;
}

inline int cmd_attack(RunConfig& c, Outputs& out, std::ostream& log) {
  const fs::path ckpt = c.required("checkpoint"), trig = c.required("triggers");
  out.input(ckpt);
  out.input(trig);
  const TriggerSet ts = load_triggers(trig);
  const ClassifierModel m = load_classifier(ckpt);
  auto [train, test] = checkpoint_split(m);
  const BimConfig bim = bim_config_from(c);
  const FineTuneConfig fc = fine_tune_config_from(c, "");
  const Dataset poisoned =
      build_poisoned_dataset(train, m, bim, fc.poison_fraction, c.u64("seed"));
  log << "poisoned training set: " << poisoned.size() << " samples ("
      << poisoned.size() - train.size() << " BIM)\n";

  const TriggerProbe probe = probe_from(ts);
  FineTuneResult res = fine_tune(m, poisoned, fc, std::span(&probe, 1), &test);
  const SensitivityTrace& t = res.trace;
  for (const auto& r : t.records)
    log << "epoch " << r.epoch << " AccTri " << fixed(r.acc_tri[0])
        << " test " << fixed(r.test_acc) << '\n';
  log << "mean AccTri: " << fixed(t.mean_acc_tri()) << '\n';
  if (fc.mode == FineTuneMode::last_layer)
    log << "masked parameters unchanged: "
        << (t.masked_hash_constant() ? "yes" : "NO") << '\n';

  res.model.metadata()["attack"] = {{"fine_tune", fc}, {"bim", bim},
                                    {"source_hash", parameter_hash_hex(m)}};
  json trace = trace_json(t);
  trace["mean_acc_tri_value"] = t.mean_acc_tri();
  out.bytes("attacked.fwm", serialize_model(res.model));
  out.text("trace.csv", trace_csv(t));
  out.json_file("trace.json", trace);
  return kOk;
}

inline int cmd_ablate(RunConfig& c, Outputs& out, std::ostream& log) {
  const fs::path ckpt = c.required("checkpoint");
  out.input(ckpt);
  const ClassifierModel m = load_classifier(ckpt);
  const SecretKey key = make_secret_key(c.size("n"), m.classes(), c.u64("seed"));
  const FragileLossConfig gc = generator_config_from(c, "gen_");
  AblationConfig ac;
  ac.a = gc.a;
  ac.epochs = gc.epochs;
  ac.optimizer = gc.optimizer;
  ac.generator_seed = mix_seed(c.u64("seed"), 0x6e);
  const std::vector<AblationArm> arms = ablation_suite(m, key, ac);
  const std::size_t index = c.size("index");
  if (index >= key.n) throw ConfigError("--index beyond the trigger count");

  const std::string table = ablation_table(arms, index);
  log << "softmax of trigger " << index << " (key label " << key.labels[index]
      << "):\n" << table;
  json summary = json::array();
  bool failed = false;
  for (const auto& arm : arms) {
    log << arm.name << ": mean top-1 " << fixed(arm.mean_top1) << ", mean variance "
        << std::scientific << std::setprecision(3) << arm.mean_variance
        << std::defaultfloat << ", AccTri vs key " << fixed(arm.run.acc_tri) << '\n';
    if (arm.failure) {
      log << "error: " << arm.name << " did not converge: " << *arm.failure << '\n';
      failed = true;
    }
    std::vector<float> rows(arm.probs.data().begin(), arm.probs.data().end());
    summary.push_back({{"name", arm.name},
                       {"a", arm.a},
                       {"include_ce", arm.include_ce},
                       {"trained", arm.trained},
                       {"acc_tri_vs_key", arm.run.acc_tri},
                       {"mean_top1", arm.mean_top1},
                       {"mean_variance", arm.mean_variance},
                       {"reference_labels", arm.reference_labels},
                       {"probs", rows}});
  }
  if (failed) return kConvergence;
  json report = {{"index", index}, {"classes", m.classes()}, {"arms", summary}};

  const std::string sens = c.str("sensitivity");
  std::vector<FineTuneMode> modes;
  if (sens == "full" || sens == "both") modes.push_back(FineTuneMode::full);
  if (sens == "last_layer" || sens == "both") modes.push_back(FineTuneMode::last_layer);
  if (sens != "none" && modes.empty())
    throw ConfigError("--sensitivity must be none, full, last_layer or both");
  if (!modes.empty()) {
    auto [train, test] = checkpoint_split(m);
    const BimConfig bim = bim_config_from(c);
    FineTuneConfig fc = fine_tune_config_from(c, "ft_");
    const Dataset poisoned =
        build_poisoned_dataset(train, m, bim, fc.poison_fraction, c.u64("seed"));
    std::vector<TriggerProbe> probes;
    for (const auto& arm : arms)
      probes.push_back({arm.name, arm.triggers.images, arm.reference_labels});
    json traces = json::object();
    for (FineTuneMode mode : modes) {
      fc.mode = mode;
      const std::string tag = json(mode).get<std::string>();
      const FineTuneResult res = fine_tune(m, poisoned, fc, probes, &test);
      log << "sensitivity (" << tag << "): epoch-1 / mean AccTri";
      for (std::size_t p = 0; p < probes.size(); ++p) {
        log << "  " << probes[p].name << " " << fixed(res.trace.records[0].acc_tri[p], 2)
            << "/" << fixed(res.trace.mean_acc_tri(p), 3);
        out.text("sensitivity_" + tag + "_" + probes[p].name + ".csv",
                 trace_csv(res.trace, p));
      }
      log << '\n';
      traces[tag] = trace_json(res.trace);
    }
    report["sensitivity"] = traces;
  }
  out.text("ablation.txt", table);
  out.json_file("ablation.json", report);
  return kOk;
}

inline int cmd_sweep(RunConfig& c, Outputs& out, std::ostream& log) {
  auto [train, test] = load_split(data_spec_from(c));
  SweepConfig sc;
  sc.archs = c.list("archs");
  sc.a_values = c.float_list("a_values");
  sc.triggers = c.size("n");
  sc.train = train_config_from(c, "train_");
  sc.generator = generator_config_from(c, "gen_");
  sc.bim = bim_config_from(c);
  sc.fine_tune = fine_tune_config_from(c, "ft_");
  sc.seed = c.u64("seed");
  sc.threads = c.size("threads");
  for (const auto& a : sc.archs) build_classifier(a, train.sample_shape(), train.classes);

  const SweepResult r = weight_sweep(train, &test, sc);
  log << "mean AccTri over " << sc.fine_tune.epochs << " fine-tuning epochs "
      << "(x = AccTri never changed):\n" << r.table();
  for (const auto& cell : r.cells)
    if (cell.error) log << "cell " << cell.arch << " a=" << cell.a << ": " << *cell.error << '\n';
  out.text("sweep.txt", r.table());
  out.text("sweep.csv", r.csv());
  out.json_file("sweep.json", r.json());
  return kOk;
}

inline std::vector<Command> commands() {
  std::vector<Command> cmds;
  {
    Command c{"train", "train a classifier", true, {}, cmd_train};
    append(c.options, data_options());
    c.options.push_back({"arch", "tiny", "tiny, small, wide or deep"});
    append(c.options, train_options(""));
    cmds.push_back(std::move(c));
  }
  {
    Command c{"watermark", "train a fragile trigger set for a classifier", true, {},
              cmd_watermark};
    c.options.push_back({"checkpoint", "", "classifier checkpoint"});
    append(c.options, generator_options(""));
    c.options.push_back({"created", "", "timestamp recorded in the trigger file "
                                        "(default: now, UTC)"});
    cmds.push_back(std::move(c));
  }
  {
    Command c{"verify", "check a classifier against a trigger set", false, {},
              cmd_verify};
    c.options.push_back({"checkpoint", "", "classifier checkpoint"});
    c.options.push_back({"triggers", "", "trigger-set file"});
    cmds.push_back(std::move(c));
  }
  {
    Command c{"attack", "BIM-poisoned fine-tuning with per-epoch AccTri", true, {},
              cmd_attack};
    c.options.push_back({"checkpoint", "", "classifier checkpoint"});
    c.options.push_back({"triggers", "", "trigger-set file"});
    append(c.options, fine_tune_options("", "full"));
    cmds.push_back(std::move(c));
  }
  {
    Command c{"ablate", "loss-component ablation (G_non, G_cla, G_full, G_var)",
              true, {}, cmd_ablate};
    c.options.push_back({"checkpoint", "", "classifier checkpoint"});
    append(c.options, generator_options("gen_"));
    c.options.push_back({"index", 0u, "trigger whose softmax row is tabulated"});
    c.options.push_back({"sensitivity", "none",
                         "also fine-tune against all four sets: none, full, "
                         "last_layer or both"});
    append(c.options, fine_tune_options("ft_", "full"));
    cmds.push_back(std::move(c));
  }
  {
    Command c{"sweep", "mean AccTri over architectures and weights a", true, {},
              cmd_sweep};
    append(c.options, data_options());
    c.options.push_back({"archs", "tiny,small,wide,deep", "comma-separated architectures"});
    c.options.push_back({"a_values", "0,50,200,800", "comma-separated weights a"});
    append(c.options, train_options("train_"));
    append(c.options, generator_options("gen_"));
    std::erase_if(c.options, [](const OptionSpec& s) { return s.key == "a"; });
    append(c.options, fine_tune_options("ft_", "last_layer"));
    c.options.push_back({"threads", 1u, "cells run concurrently"});
    cmds.push_back(std::move(c));
  }
  for (auto& c : cmds) {
    c.options.push_back({"out", "out/" + c.name, "output directory"});
    if (c.stochastic) c.options.push_back({"seed", 0u, "random seed"});
  }
  return cmds;
}

// ---------------------------------------------------------------------------
// Entry point

inline int exit_code(const std::exception_ptr& e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const ConvergenceError& x) {
    err << "convergence failure: " << x.what() << '\n';
    return kConvergence;
  } catch (const IntegrityError& x) {
    err << "integrity error: " << x.what() << '\n';
    return kIoFormat;
  } catch (const IoError& x) {
    err << "io/format error: " << x.what() << '\n';
    return kIoFormat;
  } catch (const DataError& x) {
    err << "data error: " << x.what() << '\n';
    return kIoFormat;
  } catch (const ShapeError& x) {
    err << "incompatible inputs: " << x.what() << '\n';
    return kIoFormat;
  } catch (const ConfigError& x) {
    err << "config error: " << x.what() << '\n';
    return kConfig;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << '\n';
    return kFailure;
  }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"fwmark: fragile watermarking of neural-network classifiers"};
  app.require_subcommand(1);
  const std::vector<Command> cmds = commands();
  std::map<std::string, std::map<std::string, std::string>> given;
  std::map<std::string, std::string> config_path;
  for (const auto& cmd : cmds) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path[cmd.name],
                    "key=value or JSON settings; flags take precedence");
    for (const auto& o : cmd.options) {
      std::string def = o.def.is_string() ? o.def.get<std::string>() : o.def.dump();
      std::string help = o.help;
      if (!def.empty()) help += " [" + def + "]";
      sub->add_option(flag_name(o.key), given[cmd.name][o.key], help);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  const Command* cmd = nullptr;
  for (const auto& c : cmds)
    if (app.got_subcommand(c.name)) cmd = &c;
  CLI::App* sub = app.get_subcommand(cmd->name);

  try {
    RunConfig cfg(cmd->name, cmd->options);
    if (!config_path[cmd->name].empty()) {
      const auto bytes = read_file(config_path[cmd->name]);
      cfg.merge(parse_config_text(std::string(bytes.begin(), bytes.end())));
    }
    for (const auto& o : cmd->options)
      if (sub->count(flag_name(o.key)) > 0) cfg.set(o.key, given[cmd->name][o.key]);
    if (cmd->stochastic) out << "seed: " << cfg.u64("seed") << '\n';

    Outputs outputs(cfg.str("out"));
    const int code = cmd->run(cfg, outputs, out);
    if (code != kOk && code != kVerificationFailed) return code;
    outputs.json_file("config.resolved.json", cfg.resolved());
    outputs.commit();
    out << "wrote";
    for (const auto& n : outputs.names()) out << ' ' << (outputs.dir() / n).string();
    out << '\n';
    return code;
  } catch (...) {
    return exit_code(std::current_exception(), err);
  }
}

inline int run(const std::vector<std::string>& args,
               std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"fwmark"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(int(argv.size()), argv.data(), out, err);
}

}  // namespace fwmark::cli
