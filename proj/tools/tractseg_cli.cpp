// tractseg: command-line front end for phantom simulation, direction subset
// selection, training, segmentation, uncertainty scoring and evaluation.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tractseg/tractseg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tractseg;

namespace {

// JSON config: top-level keys name subcommands, nested keys name their long
// options, e.g. {"segment": {"n": 5, "patch": 32}}. Flags given on the command
// line win over config values.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    return items(j, "", {});
  }

 private:
  static std::vector<CLI::ConfigItem> items(const json& j, const std::string& name,
                                            std::vector<std::string> prefix) {
    std::vector<CLI::ConfigItem> out;
    if (j.is_object()) {
      if (!name.empty()) prefix.push_back(name);
      for (const auto& [key, value] : j.items()) {
        auto sub = items(value, key, prefix);
        out.insert(out.end(), sub.begin(), sub.end());
      }
      return out;
    }
    if (name.empty()) return out;
    CLI::ConfigItem item;
    item.name = name;
    item.parents = prefix;
    auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    if (j.is_array()) {
      for (const auto& v : j) item.inputs.push_back(text(v));
    } else {
      item.inputs.push_back(text(j));
    }
    out.push_back(std::move(item));
    return out;
  }
};

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

// Writes to `path`, or to stdout when the path is empty.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) fail(ErrorKind::io, std::string(what) + " not found: " + path);
}

Volume mean_b0(const Volume& dwi, const GradientTable& table) {
  const auto b0 = table.b0_indices();
  if (b0.empty()) fail(ErrorKind::domain, "gradient table has no b0 measurement");
  if (dwi.channels() != table.size()) fail(ErrorKind::shape_mismatch, "DWI channels differ from gradient table");
  Volume out(dwi.grid(), 1);
  for (std::size_t v = 0; v < dwi.voxels(); ++v) {
    double s = 0.0;
    for (auto c : b0) s += dwi(v, c);
    out(v) = static_cast<float>(s / static_cast<double>(b0.size()));
  }
  return out;
}

std::vector<BinaryMask> read_masks(const std::string& path) {
  require_file(path, "label file");
  const Volume v = read_nifti(path);
  std::vector<BinaryMask> masks;
  for (std::size_t c = 0; c < v.channels(); ++c) {
    BinaryMask m(v.grid());
    for (std::size_t i = 0; i < v.voxels(); ++i) m.set(i, v(i, c) >= 0.5f);
    masks.push_back(std::move(m));
  }
  return masks;
}

// Minimal CSV: header row, comma separated, no quoting.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name, const std::string& file) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail(ErrorKind::parse, file + ": missing column '" + name + "'");
  }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Csv read_csv(const std::string& path) {
  require_file(path, "CSV file");
  std::ifstream in(path);
  Csv csv;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (csv.header.empty()) {
      csv.header = split(line);
    } else {
      csv.rows.push_back(split(line));
      if (csv.rows.back().size() != csv.header.size())
        fail(ErrorKind::parse, path + ": row width differs from header");
    }
  }
  if (csv.header.empty()) fail(ErrorKind::empty_input, path + ": empty CSV");
  return csv;
}

double parse_double(const std::string& s, const std::string& what) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) fail(ErrorKind::parse, what + ": bad number '" + s + "'");
  return v;
}

// (scan_id, tract) -> value, gathered over several files.
std::map<std::pair<std::string, std::string>, double> keyed_column(const std::vector<std::string>& files,
                                                                   const std::string& column) {
  std::map<std::pair<std::string, std::string>, double> out;
  for (const auto& f : files) {
    const auto csv = read_csv(f);
    const auto is = csv.column("scan_id", f), it = csv.column("tract", f), iv = csv.column(column, f);
    for (const auto& row : csv.rows) {
      const auto key = std::make_pair(row[is], row[it]);
      if (!out.emplace(key, parse_double(row[iv], f)).second)
        fail(ErrorKind::parse, f + ": duplicate row for scan " + row[is] + " tract " + row[it]);
    }
  }
  return out;
}

struct Paired {
  std::vector<std::pair<std::string, std::string>> keys;
  std::vector<double> u, dsc;
};

Paired pair_u_dsc(const std::vector<std::string>& u_files, const std::vector<std::string>& dsc_files) {
  const auto u = keyed_column(u_files, "u");
  const auto d = keyed_column(dsc_files, "dsc");
  if (u.size() != d.size()) fail(ErrorKind::length_mismatch, "uncertainty and metric files cover different rows");
  Paired p;
  for (const auto& [key, value] : u) {
    const auto it = d.find(key);
    if (it == d.end()) fail(ErrorKind::length_mismatch, "no DSC for scan " + key.first + " tract " + key.second);
    p.keys.push_back(key);
    p.u.push_back(value);
    p.dsc.push_back(it->second);
  }
  return p;
}

json stats_json(const DetectionStats& s) {
  return {{"accuracy", s.accuracy},       {"sensitivity", s.sensitivity}, {"specificity", s.specificity},
          {"balanced_accuracy", s.balanced_accuracy()},
          {"tp", s.tp}, {"fp", s.fp}, {"tn", s.tn}, {"fn", s.fn}};
}

json subset_json(const SubsetSelection& s) {
  return {{"indices", s.indices}, {"energy", s.energy}, {"cond", s.cond}};
}

SubsetSelection subset_from_json(const json& j) {
  SubsetSelection s;
  s.indices = j.at("indices").get<std::vector<std::size_t>>();
  s.energy = j.at("energy").get<double>();
  s.cond = j.at("cond").get<double>();
  return s;
}

// Command options -------------------------------------------------------------

struct Common {
  std::string dwi, bvals, bvecs, labels, model, out;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct SimulateOpts {
  std::string spec, bvals, bvecs, out;
  std::size_t size = 64;
  double noise = 0.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct SelectOpts {
  std::string bvals, bvecs, out;
  std::size_t k = 6, disjoint = 0;
  double b = 1000.0, b_tol = kDefaultShellTol;
  std::uint64_t seed = 0;
};

struct TrainOpts {
  std::vector<std::string> dwi, labels;
  std::string bvals, bvecs, out;
  double lr = 1e-4, fg = 1.0 / 3.0, b = 1000.0, val_fraction = 0.25;
  std::size_t epochs = 50, iterations = 0, patch = 96, k_min = 6, k_max = 12, k = 6, batch = 1;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct SegmentOpts {
  std::string dwi, bvals, bvecs, model, out, blend = "cosine";
  std::size_t n = 5, k = 6, patch = 96, stride = 0;
  double b = 1000.0, threshold = 0.5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct UncertaintyOpts {
  std::string tta, out, scorer = "l1", scan_id = "scan", model, dwi, bvals, bvecs;
  double tau = kDefaultTau, dropout_rate = 0.2;
  std::size_t passes = 5;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct EvaluateOpts {
  std::string pred, labels, out, scan_id = "scan";
};

struct DetectOpts {
  std::vector<std::string> u, dsc;
  std::string out;
  double tau = kDefaultTau, dsc_cut = kDefaultDscCut;
};

// Commands ---------------------------------------------------------------------

void cmd_simulate(const SimulateOpts& o, bool seed_given, bool noise_given) {
  require_file(o.bvals, "bvals");
  require_file(o.bvecs, "bvecs");
  const auto table = read_gradients(o.bvals, o.bvecs);
  PhantomSpec spec;
  if (!o.spec.empty()) {
    require_file(o.spec, "phantom spec");
    json j;
    try {
      std::ifstream(o.spec) >> j;
    } catch (const json::exception& e) {
      fail(ErrorKind::config, std::string("phantom spec is not valid JSON: ") + e.what());
    }
    spec = phantom_spec_from_json(j);
    if (seed_given) spec.seed = o.seed;
    if (noise_given) spec.noise_sigma = o.noise;
  } else {
    spec = crossing_tubes_spec(o.size, o.noise, o.seed);
  }
  const auto ph = simulate(spec, table, Exec{o.threads});
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_nifti(ph.dwi, dir / "dwi.nii.gz");
  write_nifti(ph.b0, dir / "b0.nii.gz");
  write_nifti(masks_to_volume(ph.labels), dir / "labels.nii.gz", NiftiDatatype::uint8);
  write_gradients(table, dir / "dwi.bval", dir / "dwi.bvec");
  json names = json::array();
  for (const auto& t : spec.tracts) names.push_back({{"label", t.label}, {"name", t.name}});
  write_text(dir / "tracts.json", names.dump(2) + "\n");
}

void cmd_select(const SelectOpts& o) {
  require_file(o.bvals, "bvals");
  require_file(o.bvecs, "bvecs");
  const auto table = read_gradients(o.bvals, o.bvecs);
  json j;
  j["k"] = o.k;
  j["seed"] = o.seed;
  if (o.disjoint > 0) {
    j["subsets"] = json::array();
    for (const auto& s : disjoint_subsets(table, o.k, o.disjoint, o.b, o.b_tol, o.seed))
      j["subsets"].push_back(subset_json(s));
  } else {
    j.update(subset_json(select_subset(table, o.k, o.b, o.b_tol, o.seed)));
  }
  emit(o.out, j.dump(2) + "\n");
}

void cmd_train(const TrainOpts& o) {
  if (o.dwi.size() != o.labels.size()) fail(ErrorKind::config, "--dwi and --labels must be given the same number of times");
  if (o.dwi.empty()) fail(ErrorKind::config, "training needs at least two --dwi/--labels pairs");
  require_file(o.bvals, "bvals");
  require_file(o.bvecs, "bvecs");
  const auto table = read_gradients(o.bvals, o.bvecs);
  std::vector<Scan> data;
  for (std::size_t i = 0; i < o.dwi.size(); ++i) {
    require_file(o.dwi[i], "DWI file");
    Volume dwi = read_nifti(o.dwi[i]);
    Volume b0 = mean_b0(dwi, table);
    // Read before building the aggregate: GCC 11 leaks already-constructed
    // members when a later initializer throws.
    auto labels = read_masks(o.labels[i]);
    data.push_back({std::move(dwi), std::move(b0), table, std::move(labels)});
  }
  TrainConfig cfg;
  cfg.learning_rate = o.lr;
  cfg.max_epochs = o.epochs;
  cfg.iterations_per_epoch = o.iterations;
  cfg.patch_size = o.patch;
  cfg.k_min = o.k_min;
  cfg.k_max = o.k_max;
  cfg.validation_k = o.k;
  cfg.batch_size = o.batch;
  cfg.b_target = o.b;
  cfg.foreground_fraction = o.fg;
  cfg.validation_fraction = o.val_fraction;
  cfg.seed = o.seed;
  const auto r = train_reference(data, cfg, Exec{o.threads});
  const fs::path dir(o.out);
  ensure_dir(dir);
  save_checkpoint(r.model, dir / "model.bin");
  write_text(dir / "train_log.csv", training_log_csv(r.log));
}

void cmd_segment(const SegmentOpts& o) {
  for (const auto& [p, w] : {std::pair{&o.dwi, "DWI file"}, {&o.bvals, "bvals"}, {&o.bvecs, "bvecs"}, {&o.model, "model"}})
    require_file(*p, w);
  const auto table = read_gradients(o.bvals, o.bvecs);
  const Volume dwi = read_nifti(o.dwi);
  const Volume b0 = mean_b0(dwi, table);
  const auto model = load_checkpoint(o.model);
  TtaConfig cfg;
  cfg.n = o.n;
  cfg.k = o.k;
  cfg.b_target = o.b;
  cfg.seed = o.seed;
  cfg.patch = {o.patch, o.stride == 0 ? std::max<std::size_t>(1, o.patch / 2) : o.stride,
               o.blend == "uniform" ? BlendWindow::uniform : BlendWindow::cosine};
  const auto r = tta_predict(model, dwi, b0, table, cfg, Exec{o.threads});
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_nifti(r.mean, dir / "prob.nii.gz");
  write_nifti(masks_to_volume(argmax_threshold_binarize(r.mean, o.threshold)), dir / "mask.nii.gz",
              NiftiDatatype::uint8);
  json j;
  j["n"] = o.n;
  j["k"] = o.k;
  j["seed"] = o.seed;
  j["subsets"] = json::array();
  for (std::size_t m = 0; m < r.predictions.size(); ++m) {
    write_nifti(r.predictions[m], dir / ("member_" + std::to_string(m) + ".nii.gz"));
    j["subsets"].push_back(subset_json(r.subsets[m]));
  }
  write_text(dir / "tta.json", j.dump(2) + "\n");
}

TtaResult load_tta(const fs::path& dir) {
  require_file((dir / "tta.json").string(), "TTA manifest");
  json j;
  try {
    std::ifstream(dir / "tta.json") >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::parse, std::string("tta.json: ") + e.what());
  }
  TtaResult t;
  const auto n = j.at("n").get<std::size_t>();
  for (std::size_t m = 0; m < n; ++m) {
    const auto p = dir / ("member_" + std::to_string(m) + ".nii.gz");
    require_file(p.string(), "TTA member");
    t.predictions.push_back(read_nifti(p));
  }
  for (const auto& s : j.at("subsets")) t.subsets.push_back(subset_from_json(s));
  t.mean = voxelwise_mean(t.predictions);
  return t;
}

void cmd_uncertainty(const UncertaintyOpts& o) {
  const auto tta = load_tta(o.tta);
  const auto scorer = o.scorer == "l2" ? EmdScorer::l2 : EmdScorer::l1;
  auto report = uncertainty_report(tta, o.scan_id, o.tau, scorer);
  if (tta.predictions.size() >= 2)
    for (auto& t : report.tracts) t.ensemble_score = voxel_std_score(tta.predictions, t.tract);
  if (!o.model.empty()) {
    for (const auto& [p, w] : {std::pair{&o.dwi, "DWI file"}, {&o.bvals, "bvals"}, {&o.bvecs, "bvecs"}, {&o.model, "model"}})
      require_file(*p, w);
    const auto table = read_gradients(o.bvals, o.bvecs);
    const Volume dwi = read_nifti(o.dwi);
    const Volume b0 = mean_b0(dwi, table);
    const auto coeffs = subset_coefficients(dwi, b0, table, tta.subsets.at(0).indices, Exec{o.threads});
    const auto drop = dropout_predictions(load_checkpoint(o.model), coeffs, o.passes, o.dropout_rate, o.seed,
                                          Exec{o.threads});
    for (auto& t : report.tracts) t.dropout_score = voxel_std_score(drop, t.tract);
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_text(dir / "uncertainty.json", uncertainty_json(report).dump(2) + "\n");
  write_text(dir / "uncertainty.csv", uncertainty_csv_header() + uncertainty_csv_rows(report));
}

void cmd_evaluate(const EvaluateOpts& o) {
  const auto pred = read_masks(o.pred);
  const auto truth = read_masks(o.labels);
  if (pred.size() != truth.size()) fail(ErrorKind::shape_mismatch, "prediction and truth differ in tract count");
  std::string out = "scan_id,tract,dsc,hd95_mm,assd_mm\n";
  for (std::size_t c = 0; c < pred.size(); ++c) {
    const auto s = seg_scores(pred[c], truth[c]);
    out += o.scan_id + "," + std::to_string(c) + "," + num(s.dsc) + "," + num(s.hd95) + "," + num(s.assd) + "\n";
  }
  emit(o.out, out);
}

void cmd_detect(const DetectOpts& o) {
  const auto p = pair_u_dsc(o.u, o.dsc);
  json j = stats_json(detection_stats(p.u, p.dsc, o.tau, o.dsc_cut));
  j["tau"] = o.tau;
  j["dsc_cut"] = o.dsc_cut;
  j["count"] = p.u.size();
  emit(o.out, j.dump(2) + "\n");
}

void cmd_calibrate(const DetectOpts& o) {
  const auto p = pair_u_dsc(o.u, o.dsc);
  const auto c = calibrate_threshold(p.u, p.dsc, o.dsc_cut);
  json j;
  j["tau"] = c.tau;
  j["dsc_cut"] = o.dsc_cut;
  j["count"] = p.u.size();
  j["stats"] = stats_json(c.stats);
  emit(o.out, j.dump(2) + "\n");
}

void cmd_plotdata(const DetectOpts& o) {
  const auto p = pair_u_dsc(o.u, o.dsc);
  std::string out = "scan_id,tract,u,dsc\n";
  for (std::size_t i = 0; i < p.u.size(); ++i)
    out += p.keys[i].first + "," + p.keys[i].second + "," + num(p.u[i]) + "," + num(p.dsc[i]) + "\n";
  emit(o.out, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"White-matter tract segmentation from q-space subsets, with EMD-based uncertainty"};
  app.name("tractseg");
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file with per-command option values");
  app.require_subcommand(1);

  SimulateOpts sim;
  auto* s_sim = app.add_subcommand("simulate", "Write a tensor phantom (DWI, b0, labels)");
  s_sim->add_option("--spec", sim.spec, "Phantom spec JSON (default: crossing tubes)");
  s_sim->add_option("--bvals", sim.bvals, "FSL bvals file")->required();
  s_sim->add_option("--bvecs", sim.bvecs, "FSL bvecs file")->required();
  s_sim->add_option("--out", sim.out, "Output directory")->required();
  s_sim->add_option("--size", sim.size, "Grid size of the default phantom")->check(CLI::Range(8, 512));
  auto* sim_noise = s_sim->add_option("--noise", sim.noise, "Gaussian noise sigma as a fraction of S0")
                        ->check(CLI::Range(0.0, 10.0));
  auto* sim_seed = s_sim->add_option("--seed", sim.seed, "Noise seed");
  s_sim->add_option("--threads", sim.threads, "Worker threads")->check(CLI::Range(1u, 256u));

  SelectOpts sel;
  auto* s_sel = app.add_subcommand("select-dirs", "Choose well-spread measurement subsets");
  s_sel->add_option("--bvals", sel.bvals, "FSL bvals file")->required();
  s_sel->add_option("--bvecs", sel.bvecs, "FSL bvecs file")->required();
  s_sel->add_option("--k", sel.k, "Subset size")->check(CLI::Range(6, 12));
  s_sel->add_option("--disjoint", sel.disjoint, "Number of pairwise disjoint subsets");
  s_sel->add_option("--b", sel.b, "Shell b-value");
  s_sel->add_option("--seed", sel.seed, "Search seed");
  s_sel->add_option("--out", sel.out, "Output JSON (default: stdout)");

  TrainOpts tr;
  auto* s_tr = app.add_subcommand("train", "Train the reference model");
  s_tr->add_option("--dwi", tr.dwi, "DWI NIfTI, once per scan")->required();
  s_tr->add_option("--labels", tr.labels, "4-D label NIfTI, once per scan")->required();
  s_tr->add_option("--bvals", tr.bvals, "FSL bvals file shared by all scans")->required();
  s_tr->add_option("--bvecs", tr.bvecs, "FSL bvecs file shared by all scans")->required();
  s_tr->add_option("--out", tr.out, "Output directory")->required();
  s_tr->add_option("--lr", tr.lr, "Initial learning rate");
  s_tr->add_option("--epochs", tr.epochs, "Epochs");
  s_tr->add_option("--iterations", tr.iterations, "Iterations per epoch (0: one per training scan)");
  s_tr->add_option("--batch", tr.batch, "Patches per step");
  s_tr->add_option("--patch", tr.patch, "Training patch edge");
  s_tr->add_option("--k-min", tr.k_min, "Smallest training subset")->check(CLI::Range(6, 12));
  s_tr->add_option("--k-max", tr.k_max, "Largest training subset")->check(CLI::Range(6, 12));
  s_tr->add_option("--k", tr.k, "Validation subset size")->check(CLI::Range(6, 12));
  s_tr->add_option("--b", tr.b, "Shell b-value");
  s_tr->add_option("--fg-fraction", tr.fg, "Share of foreground-centred patches")->check(CLI::Range(0.0, 1.0));
  s_tr->add_option("--val-fraction", tr.val_fraction, "Share of scans held out for validation");
  s_tr->add_option("--seed", tr.seed, "Training seed");
  s_tr->add_option("--threads", tr.threads, "Worker threads")->check(CLI::Range(1u, 256u));

  SegmentOpts seg;
  auto* s_seg = app.add_subcommand("segment", "Segment tracts with test-time subset augmentation");
  s_seg->add_option("--dwi", seg.dwi, "DWI NIfTI")->required();
  s_seg->add_option("--bvals", seg.bvals, "FSL bvals file")->required();
  s_seg->add_option("--bvecs", seg.bvecs, "FSL bvecs file")->required();
  s_seg->add_option("--model", seg.model, "Model checkpoint")->required();
  s_seg->add_option("--out", seg.out, "Output directory")->required();
  s_seg->add_option("--n", seg.n, "Number of TTA subsets")->check(CLI::Range(1, 1000));
  s_seg->add_option("--k", seg.k, "Subset size")->check(CLI::Range(6, 12));
  s_seg->add_option("--patch", seg.patch, "Patch edge");
  s_seg->add_option("--stride", seg.stride, "Patch stride (default: half the patch)");
  s_seg->add_option("--blend", seg.blend, "Blend window")->check(CLI::IsMember({"cosine", "uniform"}));
  s_seg->add_option("--b", seg.b, "Shell b-value");
  s_seg->add_option("--threshold", seg.threshold, "Binarization threshold");
  s_seg->add_option("--seed", seg.seed, "Subset seed");
  s_seg->add_option("--threads", seg.threads, "Worker threads")->check(CLI::Range(1u, 256u));

  UncertaintyOpts unc;
  auto* s_unc = app.add_subcommand("uncertainty", "Score TTA disagreement per tract");
  s_unc->add_option("--tta", unc.tta, "Directory written by segment")->required();
  s_unc->add_option("--out", unc.out, "Output directory")->required();
  s_unc->add_option("--tau", unc.tau, "Failure threshold on u");
  s_unc->add_option("--scorer", unc.scorer, "EMD aggregation")->check(CLI::IsMember({"l1", "l2"}));
  s_unc->add_option("--scan-id", unc.scan_id, "Scan identifier for the report");
  s_unc->add_option("--model", unc.model, "Checkpoint for the dropout baseline (optional)");
  s_unc->add_option("--dwi", unc.dwi, "DWI for the dropout baseline");
  s_unc->add_option("--bvals", unc.bvals, "FSL bvals for the dropout baseline");
  s_unc->add_option("--bvecs", unc.bvecs, "FSL bvecs for the dropout baseline");
  s_unc->add_option("--dropout-rate", unc.dropout_rate, "Dropout rate")->check(CLI::Range(0.0, 0.99));
  s_unc->add_option("--passes", unc.passes, "Dropout passes")->check(CLI::Range(2, 1000));
  s_unc->add_option("--seed", unc.seed, "Dropout seed");
  s_unc->add_option("--threads", unc.threads, "Worker threads")->check(CLI::Range(1u, 256u));

  EvaluateOpts ev;
  auto* s_ev = app.add_subcommand("evaluate", "DSC, HD95 and ASSD against ground truth");
  s_ev->add_option("--pred", ev.pred, "Predicted 4-D mask NIfTI")->required();
  s_ev->add_option("--labels", ev.labels, "Ground-truth 4-D mask NIfTI")->required();
  s_ev->add_option("--scan-id", ev.scan_id, "Scan identifier");
  s_ev->add_option("--out", ev.out, "Output CSV (default: stdout)");

  DetectOpts det, cal, plot;
  auto add_pair_opts = [](CLI::App* s, DetectOpts& o) {
    s->add_option("--u", o.u, "Uncertainty CSV file(s)")->required();
    s->add_option("--dsc", o.dsc, "Metric CSV file(s)")->required();
    s->add_option("--dsc-cut", o.dsc_cut, "DSC at or below which a segmentation is inaccurate");
    s->add_option("--out", o.out, "Output file (default: stdout)");
  };
  auto* s_det = app.add_subcommand("detect", "Detection statistics at a fixed threshold");
  add_pair_opts(s_det, det);
  s_det->add_option("--tau", det.tau, "Failure threshold on u");
  auto* s_cal = app.add_subcommand("calibrate", "Threshold maximizing balanced accuracy");
  add_pair_opts(s_cal, cal);
  auto* s_plot = app.add_subcommand("plotdata", "Paired (u, DSC) rows for plotting");
  add_pair_opts(s_plot, plot);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: usage: " << msg << "\n";
    return 2;
  }

  try {
    if (*s_sim) cmd_simulate(sim, sim_seed->count() > 0, sim_noise->count() > 0);
    else if (*s_sel) cmd_select(sel);
    else if (*s_tr) cmd_train(tr);
    else if (*s_seg) cmd_segment(seg);
    else if (*s_unc) cmd_uncertainty(unc);
    else if (*s_ev) cmd_evaluate(ev);
    else if (*s_det) cmd_detect(det);
    else if (*s_cal) cmd_calibrate(cal);
    else if (*s_plot) cmd_plotdata(plot);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << to_string(e.kind()) << ": " << msg << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: internal: " << msg << "\n";
    return 1;
  }
  return 0;
}
