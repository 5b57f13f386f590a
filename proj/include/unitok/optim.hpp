#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unitok/tensor.hpp"

namespace unitok {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Decoupled weight decay Adam. Moment buffers are owned here, keyed by the
// parameter order registered at construction; the step count is shared so a
// reloaded optimizer reproduces the bias correction exactly.
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    // Registers a parameter slot; returns its index. Call once per parameter
    // in a stable order before the first step.
    int register_param(const std::string& name, int64_t size) {
        names_.push_back(name);
        m_.emplace_back(static_cast<size_t>(size), 0.0f);
        v_.emplace_back(static_cast<size_t>(size), 0.0f);
        return static_cast<int>(names_.size()) - 1;
    }

    // One update for one parameter; call for every slot, then bump step_count
    // via finish_step(). `decay` lets callers exempt biases/norms/scalars.
    void update(int slot, Tensor& param, const std::vector<float>& grad, double lr, bool decay) {
        auto& m = m_[static_cast<size_t>(slot)];
        auto& v = v_[static_cast<size_t>(slot)];
        if (grad.size() != param.data.size() || m.size() != param.data.size())
            throw ShapeError("adamw: size mismatch for " + names_[static_cast<size_t>(slot)]);
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, step_ + 1);
        const double bc2 = 1.0 - std::pow(b2, step_ + 1);
        const double wd = decay ? cfg_.weight_decay : 0.0;
        for (size_t i = 0; i < param.data.size(); ++i) {
            double gi = grad[i];
            if (!std::isfinite(gi))
                throw std::runtime_error("adamw: non-finite gradient in parameter '" +
                                         names_[static_cast<size_t>(slot)] + "'");
            double mi = b1 * m[i] + (1.0 - b1) * gi;
            double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            double mhat = mi / bc1, vhat = vi / bc2;
            double p = param.data[i];
            p -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p);
            param.data[i] = static_cast<float>(p);
        }
    }

    void finish_step() { ++step_; }

    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }
    const AdamWConfig& config() const { return cfg_; }

    size_t num_slots() const { return names_.size(); }
    const std::string& slot_name(int slot) const { return names_[static_cast<size_t>(slot)]; }
    std::vector<float>& moment1(int slot) { return m_[static_cast<size_t>(slot)]; }
    std::vector<float>& moment2(int slot) { return v_[static_cast<size_t>(slot)]; }
    const std::vector<float>& moment1(int slot) const { return m_[static_cast<size_t>(slot)]; }
    const std::vector<float>& moment2(int slot) const { return v_[static_cast<size_t>(slot)]; }

  private:
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

}  // namespace unitok
