#pragma once

// Weakly supervised pixel classification: classical filter-bank features,
// multinomial logistic regression, random forest, hybrid stacking and a
// probability-weighted majority smoother.

#include <featpipe/featurize.hpp>
#include <featpipe/raster.hpp>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace featpipe::pixelclf {

class PixelClfError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ClassicalRecipe {
    std::vector<double> sigmas{1, 2, 4, 8, 16};
    bool per_channel = false;  ///< false: filters run on luma only

    /// raw + per sigma {gaussian, sobel, log, hessian_min, hessian_max} + DoG per consecutive pair.
    int channels_per_band() const;
    std::vector<std::string> channel_names(int image_channels) const;

    nlohmann::json to_json() const;
    static ClassicalRecipe from_json(const nlohmann::json& j);
};

struct ClassicalFeatureStack {
    FloatRaster data;
    ClassicalRecipe recipe;
    std::vector<std::string> names;
};

ClassicalFeatureStack classical_features(const Image& image, const ClassicalRecipe& recipe = {});

// Building blocks, exposed for testing. All use reflective ("d c b a | a b c d") boundaries.
std::vector<double> gaussian_kernel(double sigma);
std::vector<double> gaussian_blur(const std::vector<double>& plane, int height, int width, double sigma);
std::vector<double> sobel_magnitude(const std::vector<double>& plane, int height, int width);
int reflect_index(int i, int n);

enum class FeatureSource { deep, classical, hybrid };

/// Which feature sources a classifier consumes. The checksum pins the exact
/// recipe so a classifier is never applied to differently built features.
struct FeatureRecipe {
    FeatureSource source = FeatureSource::deep;
    int deep_dims = 0;
    nlohmann::json deep = nullptr;  ///< backend descriptor + transform set, free-form
    std::optional<ClassicalRecipe> classical;
    int classical_dims = 0;
    std::vector<std::string> classical_names;

    int dims() const { return deep_dims + classical_dims; }
    std::string channel_name(int i) const;
    nlohmann::json to_json() const;
    static FeatureRecipe from_json(const nlohmann::json& j);
    std::string checksum() const;
};

std::string to_string(FeatureSource s);
FeatureSource feature_source_from_string(const std::string& s);

/// Channel-wise concatenation, deep channels first.
FloatRaster hybrid_stack(const FloatRaster& deep, const FloatRaster& classical);

struct Samples {
    Eigen::MatrixXd x;  ///< n x D
    std::vector<int> y; ///< class label per row (1..K on the label mask)
};

/// Rows for every labelled (non-zero) pixel, in raster order. NaN / inf
/// features raise an error naming the channel.
Samples collect_samples(const FloatRaster& features, const LabelRaster& labels, const FeatureRecipe* recipe = nullptr);
void append_samples(Samples& into, const Samples& more);

enum class ClassifierKind { logistic, random_forest };
std::string to_string(ClassifierKind k);
ClassifierKind classifier_kind_from_string(const std::string& s);

struct TrainOptions {
    ClassifierKind kind = ClassifierKind::logistic;
    std::uint64_t seed = 0;
    double c_reg = 1.0;
    int max_iter = 500;
    double tol = 1e-4;
    int trees = 100;
    int workers = 1;
};

/// Mean cross-entropy + ||W||^2 / (2 C n) over standardized features; the bias is not penalized.
/// Parameters are laid out as K rows of [w_1..w_D, b].
class LogisticObjective {
public:
    LogisticObjective(Eigen::MatrixXd z, std::vector<int> y_index, int classes, double c_reg);
    double value_and_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;
    int parameters() const { return classes_ * (static_cast<int>(z_.cols()) + 1); }

private:
    Eigen::MatrixXd z_;
    std::vector<int> y_;
    int classes_;
    double c_reg_;
};

struct OptimizerResult {
    Eigen::VectorXd theta;
    std::vector<double> loss_history;
    int iterations = 0;
    double grad_norm = 0.0;
    bool converged = false;
};

/// Limited-memory BFGS with Armijo backtracking; the accepted loss never increases.
OptimizerResult minimize_lbfgs(const LogisticObjective& objective, Eigen::VectorXd theta, int max_iter, double tol,
                               int memory = 10);

struct TreeNode {
    int feature = -1;  ///< -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<double> value;  ///< leaf class distribution
};

struct Tree {
    std::vector<TreeNode> nodes;
};

struct Prediction {
    LabelRaster labels;        ///< class ids
    FloatRaster probabilities; ///< H x W x K, channel k = classes()[k]
};

class PixelClassifier {
public:
    ClassifierKind kind() const { return kind_; }
    const FeatureRecipe& recipe() const { return recipe_; }
    const std::vector<int>& classes() const { return classes_; }
    std::uint64_t seed() const { return seed_; }
    const nlohmann::json& training() const { return training_; }
    const nlohmann::json& hyperparameters() const { return hyper_; }

    /// n x K probabilities; rows sum to 1.
    Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const;
    /// Argmax class ids, lowest class id wins ties.
    std::vector<int> predict(const Eigen::MatrixXd& x) const;
    Prediction predict(const FloatRaster& features, const FeatureRecipe& recipe) const;

    // Logistic parameters in original-feature space are not kept; these are the standardized ones.
    const Eigen::VectorXd& mean() const { return mean_; }
    const Eigen::VectorXd& scale() const { return scale_; }
    const Eigen::MatrixXd& weights() const { return weights_; }
    const Eigen::VectorXd& bias() const { return bias_; }
    const std::vector<Tree>& trees() const { return trees_; }

    std::vector<std::uint8_t> serialize() const;
    static PixelClassifier deserialize(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static PixelClassifier load(const std::filesystem::path& path);

    friend PixelClassifier train(const Samples&, const FeatureRecipe&, const TrainOptions&);

private:
    ClassifierKind kind_ = ClassifierKind::logistic;
    FeatureRecipe recipe_;
    std::vector<int> classes_;
    std::uint64_t seed_ = 0;
    nlohmann::json hyper_ = nlohmann::json::object();
    nlohmann::json training_ = nlohmann::json::object();
    int dims_ = 0;
    Eigen::VectorXd mean_, scale_;
    Eigen::MatrixXd weights_;  ///< K x D
    Eigen::VectorXd bias_;
    std::vector<Tree> trees_;
};

PixelClassifier train(const Samples& samples, const FeatureRecipe& recipe, const TrainOptions& options = {});
PixelClassifier train(const FloatRaster& features, const LabelRaster& labels, const FeatureRecipe& recipe,
                      const TrainOptions& options = {});

/// Iterative majority vote in a (2r+1)^2 window; each neighbour votes for its
/// current label with weight equal to its probability for that label.
/// Stops when nothing changes or after `iterations` passes (capped at 5).
LabelRaster smooth(const LabelRaster& labels, const FloatRaster& probabilities, const std::vector<int>& classes,
                   int radius, int iterations = 5);

}  // namespace featpipe::pixelclf
