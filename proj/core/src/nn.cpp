#include "marval/nn.hpp"

#include <cmath>
#include <cstring>

#include "marval/errors.hpp"

namespace marval::nn {

Param& ParamStore::add(const std::string& name, Mat init) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw ContractError("duplicate parameter name: " + name);
    it->second.value = std::move(init);
    it->second.zero_grad();
    return it->second;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
}

bool ParamStore::grads_all_zero() const {
    for (const auto& [_, p] : params_) {
        if (!p.grad_is_zero()) return false;
    }
    return true;
}

double ParamStore::grad_norm() const {
    double sq = 0.0;
    for (const auto& [_, p] : params_) {
        if (p.grad.size() != 0) sq += p.grad.squaredNorm();
    }
    return std::sqrt(sq);
}

void ParamStore::scale_grad(double factor) {
    for (auto& [_, p] : params_) {
        if (p.grad.size() != 0) p.grad *= factor;
    }
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

bool ParamStore::same_values(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    auto a = params_.begin();
    auto b = other.params_.begin();
    for (; a != params_.end(); ++a, ++b) {
        if (a->first != b->first) return false;
        const Mat& x = a->second.value;
        const Mat& y = b->second.value;
        if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
        if (x.size() != 0 && std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0) {
            return false;
        }
    }
    return true;
}

void init_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, double gain) {
    // Xavier-uniform weights, zero bias.
    const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
    Mat w(in, out);
    for (ad::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    store.add(prefix + ".w", std::move(w));
    store.add(prefix + ".b", Mat::Zero(1, out));
}

void init_zero_linear(ParamStore& store, const std::string& prefix, int in, int out) {
    store.add(prefix + ".w", Mat::Zero(in, out));
    store.add(prefix + ".b", Mat::Zero(1, out));
}

Var linear(const Binding& b, const std::string& prefix, const Var& x) {
    return ad::add_row(ad::matmul(x, b(prefix + ".w")), b(prefix + ".b"));
}

Mat sinusoidal_embedding(const ad::Vec& positions, int dim, double max_period) {
    if (dim % 2 != 0) throw ContractError("sinusoidal_embedding: dim must be even");
    const int half = dim / 2;
    Mat out(positions.size(), dim);
    for (int j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(max_period) * static_cast<double>(j) / static_cast<double>(half));
        for (ad::Index i = 0; i < positions.size(); ++i) {
            const double a = positions(i) * freq;
            out(i, j) = std::cos(a);
            out(i, j + half) = std::sin(a);
        }
    }
    return out;
}

double AdamW::step(ParamStore& params) {
    const double norm = params.grad_norm();
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm in optimizer step");
    double clip = 1.0;
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.items()) {
        if (p.grad.size() == 0) p.zero_grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.size() == 0) {
            m = Mat::Zero(p.value.rows(), p.value.cols());
            v = Mat::Zero(p.value.rows(), p.value.cols());
        }
        const Mat g = p.grad * clip;
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        if (cfg_.lr == 0.0) continue;
        if (cfg_.weight_decay > 0.0) p.value *= (1.0 - cfg_.lr * cfg_.weight_decay);
        p.value.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
    return norm;
}

void ema_update(ParamStore& shadow, const ParamStore& source, double momentum) {
    for (auto& [name, p] : shadow.items()) {
        const Param& src = source.at(name);
        p.value = momentum * p.value + (1.0 - momentum) * src.value;
    }
}

}  // namespace marval::nn
