#pragma once

#include <map>
#include <string>

#include "marval/autodiff.hpp"
#include "marval/rng.hpp"

namespace marval::nn {

using ad::Mat;
using ad::Param;
using ad::Var;

/// Named parameter tensors. std::map keeps iteration order stable, which
/// makes checkpoints and optimizer traversal deterministic.
class ParamStore {
  public:
    Param& add(const std::string& name, Mat init);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.contains(name); }

    std::map<std::string, Param>& items() { return params_; }
    const std::map<std::string, Param>& items() const { return params_; }

    void zero_grad();
    bool grads_all_zero() const;
    double grad_norm() const;
    void scale_grad(double factor);
    std::size_t scalar_count() const;
    bool empty() const { return params_.empty(); }

    /// Bitwise equality of names, shapes and values (gradients ignored).
    bool same_values(const ParamStore& other) const;

  private:
    std::map<std::string, Param> params_;
};

/// A parameter store plus whether its leaves record gradients in this graph.
struct Binding {
    ParamStore* store = nullptr;
    bool track = false;

    Var operator()(const std::string& name) const { return ad::parameter(store->at(name), track); }
};

inline Binding tracked(ParamStore& s) { return {&s, true}; }
inline Binding frozen(ParamStore& s) { return {&s, false}; }

void init_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, double gain = 1.0);
void init_zero_linear(ParamStore& store, const std::string& prefix, int in, int out);
Var linear(const Binding& b, const std::string& prefix, const Var& x);

/// Sinusoidal features of a per-row scalar (e.g. diffusion step), rows x dim.
Mat sinusoidal_embedding(const ad::Vec& positions, int dim, double max_period = 10000.0);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // global-norm clip; 0 disables
};

class AdamW {
  public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    /// Applies one update from the accumulated gradients and returns the
    /// global gradient norm measured before clipping.
    double step(ParamStore& params);

    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }
    long steps() const { return t_; }

    // Exposed for checkpointing.
    std::map<std::string, Mat>& first_moments() { return m_; }
    std::map<std::string, Mat>& second_moments() { return v_; }
    const std::map<std::string, Mat>& first_moments() const { return m_; }
    const std::map<std::string, Mat>& second_moments() const { return v_; }
    void set_steps(long t) { t_ = t; }

  private:
    AdamWConfig cfg_;
    std::map<std::string, Mat> m_;
    std::map<std::string, Mat> v_;
    long t_ = 0;
};

/// shadow <- m * shadow + (1 - m) * source, parameter by parameter.
void ema_update(ParamStore& shadow, const ParamStore& source, double momentum);

}  // namespace marval::nn
