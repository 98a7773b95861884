#pragma once

// Layer-wise representation similarity: CCA, projection-weighted CCA against
// label-derived targets, the AUC of the per-layer curve, and the JSON / CSV
// report.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mshubert/labeler.hpp"
#include "mshubert/model.hpp"
#include "mshubert/tensor.hpp"

namespace mshubert {

using Matrix = Eigen::MatrixXd;  // rows are items (frames or segments), columns are features

Matrix to_matrix(const Tensor& t);

struct CcaResult {
  std::vector<double> correlations;  // descending, clipped to [0, 1]
  Matrix x_directions;               // [dx, m] canonical weight vectors of X
  Matrix x_variates;                 // [n, m] centred X projected on the directions
  Matrix y_variates;                 // [n, m] the same for Y
};

/// Whitening by the inverse square roots of (covariance + reg I), then an SVD
/// of the whitened cross-covariance. m = min(dx, dy) pairs.
/// reg = 0 with a singular covariance throws NumericError.
CcaResult cca_solve(const Matrix& x, const Matrix& y, double reg = 1e-6);
std::vector<double> cca(const Matrix& x, const Matrix& y, double reg = 1e-6);

/// Canonical correlations weighted by alpha_i ~ sum_j |<h_i, x_j>| over the
/// centred columns x_j of X, h_i the i-th canonical variate of X. Each rho_i
/// is the empirical correlation of the i-th variate pair, so regularisation
/// shrinks the directions but not the self-similarity of identical views.
double pwcca(const Matrix& x, const Matrix& y, double reg = 1e-6);

/// One-hot rows of frame labels; k = 0 uses max label + 1.
Matrix one_hot(std::span<const int> labels, std::size_t k = 0);

/// Runs of constant label within each utterance.
struct LabelSegment {
  std::size_t utterance = 0;
  std::size_t begin = 0;  // first frame within the utterance
  std::size_t length = 0;
  int label = 0;
};
std::vector<LabelSegment> label_segments(const LabelSet& labels);

/// Mean of the feature rows of each segment; rows of `features` are the
/// frames of all utterances stacked in order.
Matrix pool_segments(const Matrix& features, const LabelSet& labels);
/// Mean-pooled one-hot rows per segment (each a one-hot vector, the label being constant).
Matrix pooled_one_hot(const LabelSet& labels, std::size_t k = 0);

/// Trapezoidal area under scores placed on [0, 1]; a single score is its own AUC.
double layer_auc(std::span<const double> scores);

struct CcaReport {
  std::string checkpoint;
  std::string target;  // e.g. "states"
  bool pooled = false;
  double reg = 1e-6;
  std::size_t items = 0;
  std::vector<double> scores;  // layer 1..N
  double auc = 0.0;

  std::string to_json() const;
  std::string to_csv() const;
  static CcaReport from_json(const std::string& text);
};

/// Structural schema check of a report JSON: required keys and types,
/// scores and auc in [0, 1], auc consistent with the scores.
/// Throws ValidationError naming the first problem.
void validate_report_json(const std::string& text);

struct LayerCurveOptions {
  double reg = 1e-6;
  bool pooled = false;
  std::string checkpoint;
  std::string target = "states";
};

/// pwcca between every layer's eval-mode features and one-hot targets.
CcaReport layer_curve(const Model& model, std::span<const std::vector<double>> audio, const LabelSet& targets,
                      const LayerCurveOptions& options = {});

void write_report(const std::string& json_path, const CcaReport& report);

}  // namespace mshubert
