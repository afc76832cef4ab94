#pragma once

// Report emission. Floats are written with 9 significant digits and fields
// in a fixed order, so equal inputs give byte-identical files.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "selagg/bundle.hpp"
#include "selagg/localization.hpp"
#include "selagg/metrics.hpp"
#include "selagg/probe.hpp"

namespace selagg {

inline std::string format_g9(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Rounds to 9 significant digits so the JSON writer prints the short form.
inline double round_g9(double v) { return std::isfinite(v) ? std::strtod(format_g9(v).c_str(), nullptr) : v; }

namespace detail {

inline Json rounded(const std::vector<double>& v) {
  Json out = Json::array();
  for (double x : v) out.push_back(round_g9(x));
  return out;
}

}  // namespace detail

inline const char* kMetricsCsvHeader = "block,metric,mean";

/// block,metric,mean,head_0,...,head_{h-1}
inline std::string metrics_csv(const std::vector<BlockMetricSeries>& series) {
  std::ostringstream os;
  os << kMetricsCsvHeader;
  const std::size_t heads = series.empty() ? 0 : series.front().per_head.cols();
  for (std::size_t h = 0; h < heads; ++h) os << ",head_" << h;
  os << '\n';
  for (const auto& s : series)
    for (std::size_t b = 0; b < s.values.size(); ++b) {
      os << b << ',' << s.metric_name << ',' << format_g9(s.values[b]);
      for (std::size_t h = 0; h < s.per_head.cols(); ++h) os << ',' << format_g9(s.per_head.at(b, h));
      os << '\n';
    }
  return os.str();
}

inline Json metrics_json(const std::vector<BlockMetricSeries>& series) {
  Json out = Json::object();
  for (const auto& s : series) {
    Json per_head = Json::array();
    for (std::size_t b = 0; b < s.per_head.rows(); ++b) {
      std::vector<double> row(s.per_head.row(b).begin(), s.per_head.row(b).end());
      per_head.push_back(detail::rounded(row));
    }
    out[s.metric_name] = Json{{"n_images", s.n_images}, {"mean", detail::rounded(s.values)}, {"per_head", per_head}};
  }
  return out;
}

inline Json kld_json(const std::vector<std::string>& names, const Tensor64& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::vector<double> row(m.row(i).begin(), m.row(i).end());
    rows.push_back(detail::rounded(row));
  }
  return Json{{"selectors", names}, {"kld", rows}};
}

inline const char* kHistoryCsvHeader = "epoch,lr,train_loss,train_accuracy,eval_accuracy";

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << kHistoryCsvHeader << '\n';
  for (std::size_t e = 0; e < h.size(); ++e) {
    const auto& r = h[e];
    os << e << ',' << format_g9(r.lr) << ',' << format_g9(r.train_loss) << ',' << format_g9(r.train_accuracy) << ','
       << (r.eval_accuracy ? format_g9(*r.eval_accuracy) : "") << '\n';
  }
  return os.str();
}

inline Json history_json(const TrainHistory& h) {
  Json out = Json::array();
  for (std::size_t e = 0; e < h.size(); ++e) {
    const auto& r = h[e];
    Json row{{"epoch", e}, {"lr", round_g9(r.lr)}, {"train_loss", round_g9(r.train_loss)},
             {"train_accuracy", round_g9(r.train_accuracy)}};
    row["eval_accuracy"] = r.eval_accuracy ? Json(round_g9(*r.eval_accuracy)) : Json(nullptr);
    out.push_back(row);
  }
  return out;
}

inline Json max_box_acc_json(const MaxBoxAccResult& r, const MaxBoxAccConfig& cfg) {
  Json levels = Json::array();
  for (std::size_t d = 0; d < r.per_level.size(); ++d)
    levels.push_back(Json{{"iou", round_g9(cfg.iou_levels[d])},
                          {"max_box_acc", round_g9(r.per_level[d])},
                          {"best_threshold", round_g9(r.best_threshold[d])}});
  return Json{{"max_box_acc_v2", round_g9(r.score)}, {"levels", levels}};
}

inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) { satf::write_file(path, text); }

}  // namespace selagg
