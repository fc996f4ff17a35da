#include "ccdiff/optim.hpp"

#include <cmath>

namespace ccdiff {

void Adam::step(const std::vector<Tensor*>& params, const GradMap& grads) {
    if (m_.empty()) {
        for (const Tensor* p : params) {
            m_.push_back(Tensor::zeros(p->shape()));
            v_.push_back(Tensor::zeros(p->shape()));
        }
    }
    if (m_.size() != params.size())
        throw Error("Adam::step: parameter list size changed");
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor g = grads.contains(p) ? grads.grad(p) : Tensor::zeros(p.shape());
        if (!(g.shape() == p.shape()))
            throw ShapeError("Adam::step: gradient shape " + shape_str(g.shape()) +
                             " vs param " + shape_str(p.shape()));
        Tensor nm = m_[i].clone();
        Tensor nv = v_[i].clone();
        Tensor np = p.clone(true);
        double* pm = nm.mutable_data();
        double* pv = nv.mutable_data();
        double* pp = np.mutable_data();
        const double* pg = g.data();
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            pm[j] = cfg_.beta1 * pm[j] + (1.0 - cfg_.beta1) * pg[j];
            pv[j] = cfg_.beta2 * pv[j] + (1.0 - cfg_.beta2) * pg[j] * pg[j];
            const double mhat = pm[j] / bc1;
            const double vhat = pv[j] / bc2;
            pp[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (!std::isfinite(pp[j]))
                throw NumericError("Adam::step produced a non-finite parameter");
        }
        m_[i] = std::move(nm);
        v_[i] = std::move(nv);
        p = std::move(np);
    }
}

} // namespace ccdiff
