#include "nrt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "nrt/error.hpp"

namespace nrt {

double dcre(const DepthImage& depth, const CameraIntrinsics& intr, const SE3Pose& gt,
            const SE3Pose& pred, int max_pixels) {
  intr.validate();
  if (max_pixels < 1) throw Error("dcre: max_pixels must be positive");

  int valid = 0;
  for (double d : depth.data)
    if (d > 0) ++valid;
  if (valid == 0) throw Error("dcre: frame has no valid depth");
  const int stride = std::max(1, valid / max_pixels);

  const double diagonal = intr.diagonal();
  const SE3Pose pred_inv = pred.inverse();
  double sum = 0;
  std::int64_t used = 0;
  int seen = 0;
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      const double d = depth.at(u, v);
      if (d <= 0) continue;
      if (seen++ % stride != 0) continue;
      const Vec3 cam{(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d};
      const Vec3 world = gt.apply(cam);
      // Reprojection under gt is the pixel itself; only the predicted pose
      // needs an actual projection.
      const auto reproj = project(pred_inv.apply(world), intr);
      double displacement = diagonal;  // behind the predicted camera
      if (reproj)
        displacement = std::min(diagonal, ((*reproj) - Eigen::Vector2d(u, v)).norm());
      sum += displacement;
      ++used;
    }
  }
  return sum / (static_cast<double>(used) * diagonal);
}

BenchmarkSummary summarize(std::span<const FrameResult> results,
                           const EvalThresholds& thresholds) {
  if (results.empty()) throw Error("summarize: no frame results");
  BenchmarkSummary s;
  s.frame_count = static_cast<int>(results.size());
  int pose_ok = 0, fine = 0, coarse = 0, outlier = 0, na = 0;
  for (const FrameResult& r : results) {
    if (!r.valid) {
      ++na;
      ++outlier;
      continue;
    }
    if (r.translation_error <= thresholds.pose_translation &&
        r.rotation_error <= thresholds.pose_rotation)
      ++pose_ok;
    if (r.dcre_value <= thresholds.dcre_fine) ++fine;
    if (r.dcre_value <= thresholds.dcre_coarse) ++coarse;
    if (r.dcre_value > thresholds.dcre_outlier) ++outlier;
  }
  const double n = static_cast<double>(results.size());
  s.pose_accuracy = pose_ok / n;
  s.dcre_fine = fine / n;
  s.dcre_coarse = coarse / n;
  s.outlier = outlier / n;
  s.na_fraction = na / n;
  s.score = 1.0 + s.dcre_fine - s.outlier;
  return s;
}

void RejectionCounts::add(bool dynamic_query, bool rejected) {
  if (dynamic_query) {
    ++dynamic_total;
    if (rejected) ++dynamic_rejected;
  } else {
    ++static_total;
    if (rejected) ++static_rejected;
  }
}

void RejectionCounts::merge(const RejectionCounts& other) {
  dynamic_total += other.dynamic_total;
  dynamic_rejected += other.dynamic_rejected;
  static_total += other.static_total;
  static_rejected += other.static_rejected;
}

RejectionCounts count_rejections(std::span<const RoutingResult> results,
                                 std::span<const int> query_indices, const FrameCloud& frame,
                                 const MaskImage& mask) {
  if (results.size() != query_indices.size())
    throw Error("count_rejections: results do not match queries");
  RejectionCounts counts;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto [u, v] = frame.pixels[query_indices[i]];
    counts.add(mask.dynamic_at(u, v),
               results[i].status == RoutingResult::Status::kRejected);
  }
  return counts;
}

RejectionReport rejection_report(const RejectionCounts& counts) {
  RejectionReport report;
  if (counts.dynamic_total > 0) {
    report.true_rate_defined = true;
    report.true_rejection =
        static_cast<double>(counts.dynamic_rejected) / static_cast<double>(counts.dynamic_total);
  }
  if (counts.static_total > 0)
    report.false_rejection =
        static_cast<double>(counts.static_rejected) / static_cast<double>(counts.static_total);
  return report;
}

std::string summary_table(const BenchmarkSummary& s, const RejectionReport* rejection) {
  char buf[256];
  std::string out;
  out += "metric            value\n";
  auto row = [&](const char* name, double value) {
    std::snprintf(buf, sizeof(buf), "%-17s %.4f\n", name, value);
    out += buf;
  };
  std::snprintf(buf, sizeof(buf), "%-17s %d\n", "frames", s.frame_count);
  out += buf;
  row("Pose(0.05m,5deg)", s.pose_accuracy);
  row("DCRE(0.05)", s.dcre_fine);
  row("DCRE(0.15)", s.dcre_coarse);
  row("Outlier(0.5)", s.outlier);
  row("N/A", s.na_fraction);
  row("Score", s.score);
  if (rejection) {
    if (rejection->true_rate_defined)
      row("true-rejection", rejection->true_rejection);
    else
      out += "true-rejection    n/a\n";
    row("false-rejection", rejection->false_rejection);
  }
  return out;
}

void write_summary_kv(const BenchmarkSummary& s, const RejectionReport* rejection,
                      const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("write_summary_kv: cannot open " + path.string());
  char buf[128];
  auto kv = [&](const char* key, double value) {
    std::snprintf(buf, sizeof(buf), "%s=%.17g\n", key, value);
    os << buf;
  };
  os << "frames=" << s.frame_count << "\n";
  kv("pose_accuracy", s.pose_accuracy);
  kv("dcre_fine", s.dcre_fine);
  kv("dcre_coarse", s.dcre_coarse);
  kv("outlier", s.outlier);
  kv("na_fraction", s.na_fraction);
  kv("score", s.score);
  if (rejection) {
    if (rejection->true_rate_defined) kv("true_rejection", rejection->true_rejection);
    kv("false_rejection", rejection->false_rejection);
  }
  if (!os) throw Error("write_summary_kv: write failed for " + path.string());
}

void write_frame_csv(std::span<const FrameResult> results, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("write_frame_csv: cannot open " + path.string());
  os << "frame,trans_err,rot_err,dcre,rejection_rate,status\n";
  char buf[256];
  for (const FrameResult& r : results) {
    if (r.valid)
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.4f,ok\n", r.frame_id,
                    r.translation_error, r.rotation_error, r.dcre_value, r.rejection_rate);
    else
      std::snprintf(buf, sizeof(buf), "%d,,,,%.4f,na\n", r.frame_id, r.rejection_rate);
    os << buf;
  }
  if (!os) throw Error("write_frame_csv: write failed for " + path.string());
}

}  // namespace nrt
