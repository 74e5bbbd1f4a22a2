#include "dpn/hornn.hpp"

#include <iomanip>
#include <sstream>

namespace dpn::hornn {

std::string format_report(const EquivalenceReport& rep) {
  std::ostringstream os;
  os << "residual-vs-dense equivalence: trials=" << rep.trials
     << " K<=" << rep.max_steps << " dim=" << rep.state_dim << "\n";
  os << std::left << std::setw(8) << "step" << "max |dense - residual|\n";
  os << std::scientific << std::setprecision(3);
  for (std::size_t k = 0; k < rep.per_step_max.size(); ++k) {
    os << std::left << std::setw(8) << (k + 1) << rep.per_step_max[k] << "\n";
  }
  os << "max deviation " << rep.max_deviation << " (tol " << rep.tolerance << ")\n";
  return os.str();
}

}  // namespace dpn::hornn
