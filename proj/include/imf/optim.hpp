#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "imf/error.hpp"
#include "imf/nn.hpp"
#include "imf/tensor.hpp"

namespace imf {

struct AdamConfig {
    double lr = 8e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;  // decoupled: applied as an extra -lr*wd*w term
};

template <class T>
class Adam {
public:
    struct Slot {
        std::vector<T> m, v;
    };

    Adam() = default;
    Adam(std::vector<TensorEntry<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        slots_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slots_[i].m.assign(params_[i].tensor.numel(), T(0));
            slots_[i].v.assign(params_[i].tensor.numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].tensor;
            auto& slot = slots_[i];
            const bool has_grad = p.grad_allocated();
            T* w = p.data();
            const std::size_t n = p.numel();
            for (std::size_t j = 0; j < n; ++j) {
                const double g = has_grad ? static_cast<double>(p.grad_ref()[j]) : 0.0;
                if (!std::isfinite(g))
                    throw NumericError("adam: non-finite gradient in '" + params_[i].name +
                                       "' at index " + std::to_string(j) + " (step " +
                                       std::to_string(t_) + ")");
                double m = cfg_.beta1 * static_cast<double>(slot.m[j]) + (1.0 - cfg_.beta1) * g;
                double v = cfg_.beta2 * static_cast<double>(slot.v[j]) + (1.0 - cfg_.beta2) * g * g;
                slot.m[j] = static_cast<T>(m);
                slot.v[j] = static_cast<T>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                const double wd = cfg_.weight_decay * static_cast<double>(w[j]);
                w[j] = static_cast<T>(static_cast<double>(w[j]) -
                                      cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd));
            }
        }
    }

    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::int64_t step_count() const { return t_; }

    const AdamConfig& config() const { return cfg_; }
    const std::vector<TensorEntry<T>>& params() const { return params_; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_step_count(std::int64_t t) { t_ = t; }

private:
    std::vector<TensorEntry<T>> params_;
    std::vector<Slot> slots_;
    AdamConfig cfg_;
    std::int64_t t_ = 0;
};

// Multiplies the learning rate by `factor` once the monitored metric has gone
// `patience` consecutive epochs without improving (minimize mode); never drops
// below `min_lr`.
template <class T>
class ReduceLROnPlateau {
public:
    ReduceLROnPlateau() = default;
    ReduceLROnPlateau(Adam<T>* optimizer, int patience = 10, double factor = 0.5,
                      double min_lr = 1e-6)
        : opt_(optimizer), patience_(patience), factor_(factor), min_lr_(min_lr) {}

    double step(double metric) {
        if (!std::isfinite(metric)) throw NumericError("plateau scheduler: non-finite metric");
        if (metric < best_) {
            best_ = metric;
            bad_epochs_ = 0;
        } else {
            ++bad_epochs_;
            if (bad_epochs_ >= patience_) {
                opt_->set_lr(std::max(opt_->lr() * factor_, min_lr_));
                bad_epochs_ = 0;
            }
        }
        return opt_->lr();
    }

    double best() const { return best_; }
    int bad_epochs() const { return bad_epochs_; }

private:
    Adam<T>* opt_ = nullptr;
    int patience_ = 10;
    double factor_ = 0.5;
    double min_lr_ = 1e-6;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

}  // namespace imf
