#include "mshubert/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mshubert/errors.hpp"

namespace mshubert {

using nlohmann::json;

namespace {

Matrix centred(const Matrix& m) { return m.rowwise() - m.colwise().mean(); }

// (C + reg I)^(-1/2) of a symmetric covariance.
Matrix inverse_sqrt(const Matrix& c, double reg, const char* view) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(c + reg * Matrix::Identity(c.rows(), c.cols()));
  if (es.info() != Eigen::Success) throw NumericError(std::string("cca: eigendecomposition failed for ") + view);
  const Eigen::VectorXd& ev = es.eigenvalues();
  const double top = std::max(ev.maxCoeff(), 0.0);
  if (!(ev.minCoeff() > 1e-12 * top) || top == 0.0)
    throw NumericError(std::string("cca: singular covariance of ") + view + " (use reg > 0)");
  return es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

void check_inputs(const Matrix& x, const Matrix& y, double reg) {
  if (x.rows() != y.rows())
    throw DimensionError("cca: row counts differ (" + std::to_string(x.rows()) + " vs " + std::to_string(y.rows()) + ")");
  if (x.cols() == 0 || y.cols() == 0) throw DimensionError("cca: empty feature dimension");
  if (x.rows() < 2) throw InsufficientDataError("cca: need at least 2 rows");
  if (reg < 0.0 || !std::isfinite(reg)) throw ContractError("cca: reg must be finite and >= 0");
  if (!x.allFinite() || !y.allFinite()) throw NumericError("cca: non-finite feature values");
}

}  // namespace

Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("to_matrix: expected [n, d], got " + shape_string(t.shape()));
  Matrix m(t.dim(0), t.dim(1));
  const auto v = t.data();
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = v[i * t.dim(1) + j];
  return m;
}

CcaResult cca_solve(const Matrix& x, const Matrix& y, double reg) {
  check_inputs(x, y, reg);
  const Matrix xc = centred(x), yc = centred(y);
  const double denom = static_cast<double>(x.rows() - 1);
  const Matrix cxx = xc.transpose() * xc / denom;
  const Matrix cyy = yc.transpose() * yc / denom;
  const Matrix cxy = xc.transpose() * yc / denom;
  const Matrix wx = inverse_sqrt(cxx, reg, "X"), wy = inverse_sqrt(cyy, reg, "Y");
  Eigen::JacobiSVD<Matrix> svd(wx * cxy * wy, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::Index m = std::min(x.cols(), y.cols());
  CcaResult r;
  r.correlations.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) r.correlations[i] = std::clamp(svd.singularValues()(i), 0.0, 1.0);
  r.x_directions = wx * svd.matrixU().leftCols(m);
  r.x_variates = xc * r.x_directions;
  r.y_variates = yc * (wy * svd.matrixV().leftCols(m));
  return r;
}

std::vector<double> cca(const Matrix& x, const Matrix& y, double reg) { return cca_solve(x, y, reg).correlations; }

double pwcca(const Matrix& x, const Matrix& y, double reg) {
  const CcaResult r = cca_solve(x, y, reg);
  const Matrix xc = centred(x);
  const Eigen::Index m = r.x_variates.cols();
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto h = r.x_variates.col(i), g = r.y_variates.col(i);
    const double hn = h.norm(), gn = g.norm();
    // Empirical correlation of the pair; equals the singular value when reg = 0.
    const double rho = (hn > 0.0 && gn > 0.0) ? std::min(1.0, std::abs(h.dot(g)) / (hn * gn)) : 0.0;
    const double alpha = (xc.transpose() * h).cwiseAbs().sum();
    num += alpha * rho;
    den += alpha;
  }
  if (!(den > 0.0)) throw NumericError("pwcca: all projection weights are zero");
  return std::clamp(num / den, 0.0, 1.0);
}

Matrix one_hot(std::span<const int> labels, std::size_t k) {
  int top = -1;
  for (int l : labels) {
    if (l < 0) throw ValidationError("one_hot: negative label " + std::to_string(l));
    top = std::max(top, l);
  }
  if (k == 0) k = static_cast<std::size_t>(top + 1);
  if (top >= static_cast<int>(k)) throw ValidationError("one_hot: label " + std::to_string(top) + " >= k = " + std::to_string(k));
  Matrix m = Matrix::Zero(labels.size(), k);
  for (std::size_t i = 0; i < labels.size(); ++i) m(i, labels[i]) = 1.0;
  return m;
}

std::vector<LabelSegment> label_segments(const LabelSet& labels) {
  std::vector<LabelSegment> out;
  for (std::size_t u = 0; u < labels.size(); ++u) {
    const auto& seq = labels[u];
    for (std::size_t t = 0; t < seq.size();) {
      std::size_t e = t + 1;
      while (e < seq.size() && seq[e] == seq[t]) ++e;
      out.push_back({u, t, e - t, seq[t]});
      t = e;
    }
  }
  return out;
}

Matrix pool_segments(const Matrix& features, const LabelSet& labels) {
  std::size_t frames = 0;
  for (const auto& s : labels) frames += s.size();
  if (static_cast<std::size_t>(features.rows()) != frames)
    throw DimensionError("pool_segments: " + std::to_string(features.rows()) + " feature rows for " + std::to_string(frames) + " labelled frames");
  const auto segs = label_segments(labels);
  Matrix out(segs.size(), features.cols());
  std::vector<std::size_t> offset(labels.size() + 1, 0);
  for (std::size_t u = 0; u < labels.size(); ++u) offset[u + 1] = offset[u] + labels[u].size();
  for (std::size_t s = 0; s < segs.size(); ++s)
    out.row(s) = features.middleRows(offset[segs[s].utterance] + segs[s].begin, segs[s].length).colwise().mean();
  return out;
}

Matrix pooled_one_hot(const LabelSet& labels, std::size_t k) {
  std::vector<int> flat;
  for (const auto& s : labels) flat.insert(flat.end(), s.begin(), s.end());
  return pool_segments(one_hot(flat, k), labels);
}

double layer_auc(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("layer_auc: no scores");
  if (scores.size() == 1) return scores.front();
  const double h = 1.0 / static_cast<double>(scores.size() - 1);
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) area += 0.5 * h * (scores[i] + scores[i + 1]);
  return area;
}

std::string CcaReport::to_json() const {
  json j;
  j["checkpoint"] = checkpoint;
  j["target"] = target;
  j["pooled"] = pooled;
  j["reg"] = reg;
  j["items"] = items;
  j["scores"] = scores;
  j["auc"] = auc;
  return j.dump(2) + "\n";
}

std::string CcaReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer,score\n";
  for (std::size_t i = 0; i < scores.size(); ++i) os << i + 1 << "," << scores[i] << "\n";
  return os.str();
}

void validate_report_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("report: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("report: top level must be an object");
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw ValidationError(std::string("report: missing key '") + key + "'");
    return j.at(key);
  };
  if (!need("checkpoint").is_string()) throw ValidationError("report: 'checkpoint' must be a string");
  if (!need("target").is_string()) throw ValidationError("report: 'target' must be a string");
  const json& scores = need("scores");
  if (!scores.is_array() || scores.empty()) throw ValidationError("report: 'scores' must be a non-empty array");
  std::vector<double> s;
  for (const auto& v : scores) {
    if (!v.is_number()) throw ValidationError("report: scores must be numbers");
    const double d = v.get<double>();
    if (!(d >= 0.0 && d <= 1.0)) throw ValidationError("report: score " + std::to_string(d) + " outside [0, 1]");
    s.push_back(d);
  }
  const json& auc = need("auc");
  if (!auc.is_number()) throw ValidationError("report: 'auc' must be a number");
  const double a = auc.get<double>();
  if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("report: auc outside [0, 1]");
  if (std::abs(a - layer_auc(s)) > 1e-12) throw ValidationError("report: auc does not match the trapezoid of the scores");
  if (j.contains("pooled") && !j["pooled"].is_boolean()) throw ValidationError("report: 'pooled' must be a boolean");
  if (j.contains("reg") && !j["reg"].is_number()) throw ValidationError("report: 'reg' must be a number");
  if (j.contains("items") && !j["items"].is_number_unsigned()) throw ValidationError("report: 'items' must be a count");
}

CcaReport CcaReport::from_json(const std::string& text) {
  validate_report_json(text);
  const json j = json::parse(text);
  CcaReport r;
  r.checkpoint = j["checkpoint"].get<std::string>();
  r.target = j["target"].get<std::string>();
  r.pooled = j.value("pooled", false);
  r.reg = j.value("reg", 1e-6);
  r.items = j.value("items", std::size_t{0});
  r.scores = j["scores"].get<std::vector<double>>();
  r.auc = j["auc"].get<double>();
  return r;
}

CcaReport layer_curve(const Model& model, std::span<const std::vector<double>> audio, const LabelSet& targets,
                      const LayerCurveOptions& options) {
  if (audio.size() != targets.size())
    throw DimensionError("layer_curve: " + std::to_string(audio.size()) + " utterances but " + std::to_string(targets.size()) + " target sequences");
  const auto layers = extract_all_layers(model, audio);
  std::vector<int> flat;
  for (const auto& s : targets) flat.insert(flat.end(), s.begin(), s.end());
  if (layers.front().dim(0) != flat.size())
    throw DimensionError("layer_curve: " + std::to_string(layers.front().dim(0)) + " frames but " + std::to_string(flat.size()) + " target labels");
  const Matrix y = options.pooled ? pooled_one_hot(targets) : one_hot(flat);
  CcaReport r;
  r.checkpoint = options.checkpoint;
  r.target = options.target;
  r.pooled = options.pooled;
  r.reg = options.reg;
  r.items = static_cast<std::size_t>(y.rows());
  for (const auto& l : layers) {
    Matrix x = to_matrix(l);
    if (options.pooled) x = pool_segments(x, targets);
    r.scores.push_back(pwcca(x, y, options.reg));
  }
  r.auc = layer_auc(r.scores);
  return r;
}

void write_report(const std::string& json_path, const CcaReport& report) {
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot write " + path);
    f << text;
    if (!f) throw ValidationError("write failed: " + path);
  };
  write(json_path, report.to_json());
  std::string csv = json_path;
  if (csv.size() > 5 && csv.ends_with(".json")) csv.resize(csv.size() - 5);
  write(csv + ".csv", report.to_csv());
}

}  // namespace mshubert
