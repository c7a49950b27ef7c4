#include "gammadesk/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gammadesk/errors.hpp"

namespace gammadesk {

namespace {

double evaluate(const LossFn& loss, const std::string& where) {
  Tape tape;
  const double v = loss(tape).value().item();
  if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite loss at " + where);
  return v;
}

}  // namespace

GradCheckReport gradient_check(const LossFn& loss, ParameterSet& params, double epsilon) {
  Gradients analytic;
  {
    Tape tape;
    Var l = loss(tape);
    if (!std::isfinite(l.value().item())) throw NumericError("gradient_check: non-finite loss at base point");
    analytic = tape.backward(l);
  }

  GradCheckReport report;
  for (auto& p : params) {
    auto it = analytic.find(&p);
    const Tensor zero = Tensor::zeros(p.value.shape());
    const Tensor& g = it == analytic.end() ? zero : it->second;
    for (std::size_t k = 0; k < p.value.numel(); ++k) {
      const std::string where = p.name + "[" + std::to_string(k) + "]";
      const double orig = p.value[k];
      p.value[k] = orig + epsilon;
      const double up = evaluate(loss, where);
      p.value[k] = orig - epsilon;
      const double down = evaluate(loss, where);
      p.value[k] = orig;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double denom = std::max({std::abs(g[k]), std::abs(numeric), 1e-12});
      const double err = std::abs(g[k] - numeric) / denom;
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = p.name;
        report.worst_index = k;
      }
    }
  }
  return report;
}

}  // namespace gammadesk
