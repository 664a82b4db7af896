#include "occmesh/init.hpp"

#include "occmesh/rng.hpp"

namespace occmesh {

Tensor uniform_param(const Shape& shape, double bound, std::uint64_t seed, std::string_view name) {
    KeyedRng rng{seed, fnv1a64(name)};
    std::vector<double> v(static_cast<std::size_t>(numel(shape)));
    for (double& e : v) e = rng.uniform(-bound, bound);
    Tensor t(shape, std::move(v));
    t.set_requires_grad(true);
    return t;
}

}  // namespace occmesh
