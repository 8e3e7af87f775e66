// Parameter registry and Adam with decoupled weight decay plus global
// gradient-norm clipping.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "sicql/tensor.hpp"

namespace sicql {

struct OptimizerConfig {
    double learning_rate = 3e-4;
    double weight_decay = 1e-4;
    double grad_clip_norm = 10.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw TensorError("learning_rate must be > 0");
        if (!(weight_decay >= 0.0)) throw TensorError("weight_decay must be >= 0");
        if (!(grad_clip_norm > 0.0)) throw TensorError("grad_clip_norm must be > 0");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw TensorError("beta1 must be in (0,1)");
        if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw TensorError("beta2 must be in (0,1)");
        if (!(adam_eps > 0.0)) throw TensorError("adam_eps must be > 0");
    }
};

// Ordered collection of named parameters with matching gradient buffers.
// Registration order fixes iteration order everywhere (updates, checkpoints,
// checksums), which is what makes single-threaded runs bit-reproducible.
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
    };

    Tensor& add(const std::string& name, Tensor init) {
        for (const Entry& e : entries_) {
            if (e.name == name) throw TensorError("duplicate parameter name: " + name);
        }
        entries_.push_back(Entry{name, std::move(init), Tensor()});
        Entry& e = entries_.back();
        e.grad = Tensor(e.value.shape());
        return e.value;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Entry& find(const std::string& name) {
        for (Entry& e : entries_) {
            if (e.name == name) return e;
        }
        throw TensorError("unknown parameter: " + name);
    }
    const Entry& find(const std::string& name) const {
        return const_cast<ParamSet*>(this)->find(name);
    }

    void zero_grads() {
        for (Entry& e : entries_) e.grad.fill(0.0);
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const Entry& e : entries_) n += e.value.numel();
        return n;
    }

    double grad_norm() const {
        double s = 0.0;
        for (const Entry& e : entries_) {
            const double* p = e.grad.data();
            const int64_t n = e.grad.numel();
            for (int64_t i = 0; i < n; ++i) s += p[i] * p[i];
        }
        return std::sqrt(s);
    }

    bool values_finite() const {
        for (const Entry& e : entries_) {
            if (!e.value.all_finite()) return false;
        }
        return true;
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const Entry& e : entries_) {
            h = fnv1a64(e.name.data(), e.name.size(), h);
            h = tensor_checksum(e.value, h);
        }
        return h;
    }

    // Elementwise Polyak average toward `src`: this <- (1-alpha)*this + alpha*src.
    // Structures must match exactly.
    void polyak_from(const ParamSet& src, double alpha) {
        if (src.entries_.size() != entries_.size()) throw TensorError("polyak structure mismatch");
        for (size_t i = 0; i < entries_.size(); ++i) {
            Entry& dst = entries_[i];
            const Entry& s = src.entries_[i];
            if (dst.name != s.name || !dst.value.same_shape(s.value)) {
                throw TensorError("polyak structure mismatch at " + dst.name);
            }
            double* pd = dst.value.data();
            const double* ps = s.value.data();
            const int64_t n = dst.value.numel();
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) pd[j] = (1.0 - alpha) * pd[j] + alpha * ps[j];
        }
    }

    void copy_values_from(const ParamSet& src) { polyak_from(src, 1.0); }

private:
    std::vector<Entry> entries_;
};

struct AdamStepInfo {
    double grad_norm = 0.0;   // pre-clip global L2 norm
    bool clipped = false;
};

// AdamW: decay is applied to the parameter directly (param -= lr*wd*param
// using the pre-update value), never through the moment estimates. Gradients
// are rescaled by clip/norm when the global L2 norm exceeds the clip.
class Adam {
public:
    Adam() = default;
    explicit Adam(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const OptimizerConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    AdamStepInfo step(ParamSet& params) {
        auto& es = params.entries();
        if (m_.empty()) {
            for (const auto& e : es) {
                m_.push_back(Tensor(e.value.shape()));
                v_.push_back(Tensor(e.value.shape()));
            }
        }
        if (m_.size() != es.size()) throw TensorError("optimizer/parameter structure mismatch");

        AdamStepInfo info;
        info.grad_norm = params.grad_norm();
        if (!std::isfinite(info.grad_norm)) throw TensorError("non-finite gradient norm");
        double gscale = 1.0;
        if (info.grad_norm > cfg_.grad_clip_norm) {
            gscale = cfg_.grad_clip_norm / info.grad_norm;
            info.clipped = true;
        }

        t_ += 1;
        const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
        const double decay = 1.0 - cfg_.learning_rate * cfg_.weight_decay;

        for (size_t i = 0; i < es.size(); ++i) {
            auto& e = es[i];
            if (!e.grad.same_shape(e.value)) throw TensorError("grad/param shape mismatch: " + e.name);
            double* p = e.value.data();
            const double* gr = e.grad.data();
            double* m = m_[i].data();
            double* v = v_[i].data();
            const int64_t n = e.value.numel();
            for (int64_t j = 0; j < n; ++j) {
                const double g = gr[j] * gscale;
                m[j] = cfg_.adam_beta1 * m[j] + (1.0 - cfg_.adam_beta1) * g;
                v[j] = cfg_.adam_beta2 * v[j] + (1.0 - cfg_.adam_beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p[j] = decay * p[j] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
        return info;
    }

    // Moment buffers exposed for checkpointing, in parameter order.
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    OptimizerConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

}  // namespace sicql
