// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/harness.hpp"

#include "maskdiff/image_io.hpp"
#include "maskdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace maskdiff {
namespace {

namespace fs = std::filesystem;

std::string cell_name(bool dmfe_on, bool es_on) {
  return std::string("dmfe") + (dmfe_on ? "1" : "0") + "_es" + (es_on ? "1" : "0");
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10);
  return out;
}

struct Canvas {
  int width, height;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3), 255) {}

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const auto i = static_cast<std::size_t>((y * width + x) * 3);
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }

  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void box(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) set(x, y, c);
    }
  }
};

}  // namespace

EvalReport evaluate(const MaskDiffusionModel<float>& model, const Dataset& data, const TrainConfig& config,
                    std::uint64_t seed, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("evaluate: batch_size must be positive");
  const DiffusionSchedule sched(config.T_train, config.snr_shift);
  EvalReport report;
  report.fingerprint = config_fingerprint(config);
  for (std::size_t lo = 0; lo < data.size(); lo += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = lo; i < hi; ++i) idx.push_back(i);
    const Batch<float> batch = make_batch<float>(data, idx);
    SampleOptions opt = sample_options(config, derive_seed(seed, {lo}));
    opt.record_trace = false;
    const Tensor<float> prob = sample_ensemble(model, batch.image, sched, opt, config.ensemble);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto ki = static_cast<Index>(k);
      report.ids.push_back(data[idx[k]].id);
      report.auc.push_back(pixel_auc(prob.sample(ki), batch.gt_mask.sample(ki)));
    }
  }
  report.summary = summarize_auc(report.auc);
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << "# config_fingerprint: " << report.fingerprint << "\n";
  s << "# auc_aggregation: " << kAucAggregation << "\n";
  s << "images: " << report.ids.size() << "\n";
  s << "mean_auc: " << report.summary.mean << "\n";
  s << "excluded_constant_gt: " << report.summary.excluded << "\n";
  for (std::size_t i = 0; i < report.ids.size(); ++i) {
    s << "  " << report.ids[i] << ": ";
    if (report.auc[i]) {
      s << *report.auc[i];
    } else {
      s << "undefined";
    }
    s << "\n";
  }
  return s.str();
}

void write_report_csv(const fs::path& path, const EvalReport& report) {
  auto out = open_out(path);
  out << "# config_fingerprint=" << report.fingerprint << "\n# auc_aggregation=" << kAucAggregation << "\n";
  out << "id,auc\n";
  for (std::size_t i = 0; i < report.ids.size(); ++i) {
    out << report.ids[i] << ",";
    if (report.auc[i]) out << *report.auc[i];
    out << "\n";
  }
  out << "mean," << report.summary.mean << "\nexcluded," << report.summary.excluded << "\n";
}

std::vector<AblationRow> run_ablation(const Dataset& train_set, const Dataset& test_set, const TrainConfig& base,
                                      const AblationOptions& options) {
  std::vector<AblationRow> rows;
  for (const bool dmfe : {true, false}) {
    for (const bool es : {true, false}) {
      TrainConfig cfg = base;
      cfg.dmfe_on = dmfe;
      cfg.es_on = es;
      const std::string name = cell_name(dmfe, es);
      const fs::path dir = options.checkpoint_root.empty() ? fs::path() : options.checkpoint_root / name;
      std::unique_ptr<MaskDiffusionModel<float>> model;
      if (!dir.empty() && fs::exists(dir / "weights.bin")) {
        Checkpoint<float> ck = load_checkpoint<float>(dir);
        cfg = ck.config;
        model = std::move(ck.model);
        if (options.log) options.log(name + ": loaded checkpoint " + dir.string());
      } else {
        if (!options.allow_training) throw std::runtime_error("ablation: missing checkpoint for cell " + name);
        model = std::make_unique<MaskDiffusionModel<float>>(cfg.effective_model(), cfg.seed);
        Trainer<float> trainer(cfg, *model, planned_steps(cfg, train_set.size()));
        train(trainer, train_set, [&](const StepStats& s) {
          if (options.log && (s.step + 1) % 50 == 0) {
            options.log(name + ": step " + std::to_string(s.step + 1) + " loss " + std::to_string(s.loss));
          }
        });
        if (!dir.empty()) save_checkpoint(dir, *model, cfg, trainer.step(), &trainer.optimizer());
      }
      const EvalReport report = evaluate(*model, test_set, cfg, options.eval_seed);
      rows.push_back({dmfe, es, report.summary, report.fingerprint});
      if (options.log) options.log(name + ": mean AUC " + std::to_string(report.summary.mean));
    }
  }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << "# auc_aggregation: " << kAucAggregation << "\n";
  s << "dmfe  es   mean_auc  excluded  fingerprint\n";
  for (const auto& r : rows) {
    s << (r.dmfe_on ? "on " : "off") << "   " << (r.es_on ? "on " : "off") << "  " << r.summary.mean << "    "
      << r.summary.excluded << "         " << r.fingerprint << "\n";
  }
  return s.str();
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  auto out = open_out(path);
  out << "# auc_aggregation=" << kAucAggregation << "\n";
  out << "dmfe_on,es_on,mean_auc,excluded,fingerprint\n";
  for (const auto& r : rows) {
    out << r.dmfe_on << "," << r.es_on << "," << r.summary.mean << "," << r.summary.excluded << "," << r.fingerprint
        << "\n";
  }
}

RobustnessReport run_robustness(const MaskDiffusionModel<float>& model, const Dataset& test_set,
                                const TrainConfig& config, const std::vector<AttackSpec>& grid, std::uint64_t seed) {
  RobustnessReport report;
  report.fingerprint = config_fingerprint(config);
  report.clean = evaluate(model, test_set, config, seed).summary;
  for (const AttackSpec& spec : grid) {
    Dataset attacked;
    attacked.reserve(test_set.size());
    for (const Sample& s : test_set) {
      try {
        attacked.push_back(apply_attack(s, spec));
      } catch (const std::exception& e) {
        throw std::runtime_error("attack " + to_string(spec.kind) + " failed on sample '" + s.id + "': " + e.what());
      }
    }
    report.points.push_back({spec, evaluate(model, attacked, config, seed).summary});
  }
  return report;
}

std::vector<AttackSpec> read_attack_grid(const fs::path& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read attack grid " + path.string());
  std::vector<AttackSpec> grid;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    std::string kind;
    double strength = 0;
    if (!(fields >> kind >> strength)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 'kind,strength'");
    }
    grid.push_back({parse_attack_kind(kind), strength, seed});
  }
  return grid;
}

void write_robustness_csv(const fs::path& path, const RobustnessReport& report) {
  auto out = open_out(path);
  out << "# config_fingerprint=" << report.fingerprint << "\n# auc_aggregation=" << kAucAggregation << "\n";
  out << "kind,strength,mean_auc,excluded\n";
  out << "clean,0," << report.clean.mean << "," << report.clean.excluded << "\n";
  for (const auto& p : report.points) {
    out << to_string(p.attack.kind) << "," << p.attack.strength << "," << p.summary.mean << "," << p.summary.excluded
        << "\n";
  }
}

void render_robustness_plot(const fs::path& path, const RobustnessReport& report) {
  constexpr int kPanelW = 220, kPanelH = 180, kMargin = 20;
  const std::array<AttackKind, 4> kinds{AttackKind::gaussian_noise, AttackKind::gaussian_blur, AttackKind::scaling,
                                        AttackKind::distortion};
  Canvas canvas(kPanelW * 4, kPanelH);
  const std::array<std::uint8_t, 3> axis{0, 0, 0}, grid{210, 210, 210}, curve{30, 80, 200}, clean{200, 60, 40};
  for (std::size_t p = 0; p < kinds.size(); ++p) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& pt : report.points) {
      if (pt.attack.kind == kinds[p]) pts.emplace_back(pt.attack.strength, pt.summary.mean);
    }
    std::sort(pts.begin(), pts.end());
    const int x0 = static_cast<int>(p) * kPanelW + kMargin, x1 = static_cast<int>(p + 1) * kPanelW - kMargin / 2;
    const int y0 = kMargin / 2, y1 = kPanelH - kMargin;
    const double xmax = pts.empty() ? 1.0 : std::max(pts.back().first, 1e-9);
    auto px = [&](double s) { return x0 + static_cast<int>(std::lround((x1 - x0) * s / xmax)); };
    auto py = [&](double auc) { return y1 - static_cast<int>(std::lround((y1 - y0) * std::clamp(auc, 0.0, 1.0))); };
    for (double g : {0.25, 0.5, 0.75}) canvas.line(x0, py(g), x1, py(g), grid);
    for (int x = x0; x <= x1; x += 6) canvas.line(x, py(report.clean.mean), std::min(x + 2, x1), py(report.clean.mean), clean);
    canvas.line(x0, y1, x1, y1, axis);
    canvas.line(x0, y0, x0, y1, axis);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const int cx = px(pts[i].first), cy = py(pts[i].second);
      canvas.box(cx - 2, cy - 2, cx + 2, cy + 2, curve);
      if (i > 0) canvas.line(px(pts[i - 1].first), py(pts[i - 1].second), cx, cy, curve);
    }
  }
  write_png(path, ImageU8{canvas.width, canvas.height, 3, std::move(canvas.rgb)});
}

void render_trace(const SampleTrace<float>& trace, const fs::path& path, Index item) {
  if (trace.empty()) throw std::invalid_argument("render_trace: empty trace");
  const Tensor<float>& first = trace.front().x0_hat;
  if (item < 0 || item >= first.dim(0)) throw std::out_of_range("render_trace: batch item out of range");
  const Index h = first.dim(2), w = first.dim(3), cols = static_cast<Index>(trace.size());
  Tensor<float> grid(Shape{1, 1, 3 * h, cols * w});
  for (Index c = 0; c < cols; ++c) {
    const auto& step = trace[static_cast<std::size_t>(c)];
    const std::array<const Tensor<float>*, 3> rows{&step.x_t, &step.x0_hat, &step.edge_prob};
    for (Index r = 0; r < 3; ++r) {
      const Tensor<float> plane = rows[static_cast<std::size_t>(r)]->sample(item);
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          float v = plane[y * w + x];
          if (r < 2) v = (v + 1.0f) / 2.0f;
          grid(0, 0, r * h + y, c * w + x) = v;
        }
      }
    }
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_png(path, to_image(grid));
}

void write_trace_csv(const SampleTrace<float>& trace, const fs::path& path, Index item) {
  auto out = open_out(path);
  out << "step,t,row,mean,min,max\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& s = trace[i];
    const std::array<std::pair<const char*, const Tensor<float>*>, 3> rows{
        {{"x_t", &s.x_t}, {"x0_hat", &s.x0_hat}, {"edge_prob", &s.edge_prob}}};
    for (const auto& [name, t] : rows) {
      const Tensor<float> p = t->sample(item);
      out << i << "," << s.t << "," << name << "," << p.vec().mean() << "," << p.vec().minCoeff() << ","
          << p.vec().maxCoeff() << "\n";
    }
  }
}

}  // namespace maskdiff
