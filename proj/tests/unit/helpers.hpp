#pragma once

#include <initializer_list>

#include "agfn/graph.hpp"

namespace agfn::test {

struct E {
    int u, v, f;
};

// Graph from 0-based (u, v, feature) triples with u < v.
inline AncestralGraph make_graph(int n, std::initializer_list<E> edges) {
    AncestralGraph g(n);
    for (const auto& e : edges) g = g.with_feature({e.u, e.v}, static_cast<Feature>(e.f));
    return g;
}

}  // namespace agfn::test
