#include "circuitlab/posttrain/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace clab {

std::size_t FreezeMask::count() const
{
    std::size_t n = 0;
    for (const char f : frozen) n += f != 0;
    return n;
}

std::vector<std::string> FreezeMask::names(const ComputationalGraph& graph) const
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < frozen.size(); ++i)
        if (frozen[i]) out.push_back(to_string(graph.node(static_cast<int>(i))));
    return out;
}

void AdamWConfig::validate() const
{
    if (!(learning_rate > 0.0)) throw std::invalid_argument("adamw: learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adamw: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adamw: epsilon must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("adamw: weight_decay must be >= 0");
}

AdamWState AdamWState::zeros_like(const Weights& w)
{
    AdamWState s;
    for (const auto& comp : w) {
        s.m.emplace_back();
        s.v.emplace_back();
        for (const auto& p : comp) {
            s.m.back().push_back(Matrix::Zero(p.rows(), p.cols()));
            s.v.back().push_back(Matrix::Zero(p.rows(), p.cols()));
        }
    }
    s.t.assign(w.size(), 0);
    return s;
}

bool adamw_step(Weights& params, const Weights& grads, AdamWState& state, const AdamWConfig& c, const FreezeMask* mask)
{
    if (grads.size() != params.size() || state.m.size() != params.size() || state.t.size() != params.size())
        throw std::invalid_argument("adamw: component count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].size() != params[i].size()) throw std::invalid_argument("adamw: matrix count mismatch");
        for (std::size_t k = 0; k < params[i].size(); ++k)
            if (grads[i][k].rows() != params[i][k].rows() || grads[i][k].cols() != params[i][k].cols())
                throw std::invalid_argument("adamw: gradient shape mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (mask && mask->is_frozen(i)) continue;
        for (const auto& g : grads[i])
            if (!g.allFinite()) return false;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (mask && mask->is_frozen(i)) continue;
        const auto t = static_cast<double>(++state.t[i]);
        const double bc1 = 1.0 - std::pow(c.beta1, t);
        const double bc2 = 1.0 - std::pow(c.beta2, t);
        for (std::size_t k = 0; k < params[i].size(); ++k) {
            Matrix& p = params[i][k];
            const Matrix& g = grads[i][k];
            Matrix& m = state.m[i][k];
            Matrix& v = state.v[i][k];
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
            const Matrix step = (m / bc1).array() / ((v / bc2).array().sqrt() + c.epsilon);
            p -= c.learning_rate * (step + c.weight_decay * p);
        }
    }
    return true;
}

}  // namespace clab
