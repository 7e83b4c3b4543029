#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fedprotokd/net.hpp"
#include "fedprotokd/rng.hpp"

namespace fedprotokd {

// Client/server model: a private feature extractor of arbitrary width,
// a linear projection into the shared representation space, and a linear
// classifier head on top of the projected features. Only the projected
// space (and logits) ever leave the model, which is what lets clients
// with different extractor shapes exchange prototypes.
struct ProjectedNet {
    DenseNet extractor;   // input_dim -> native_dim, relu stack
    DenseNet projection;  // native_dim -> common_dim, single affine
    DenseNet head;        // common_dim -> class_count, single affine
    bool extractor_frozen = false;

    std::size_t input_dim() const { return extractor.input_dim(); }
    std::size_t native_dim() const { return extractor.output_dim(); }
    std::size_t common_dim() const { return projection.output_dim(); }
    std::size_t class_count() const { return head.output_dim(); }

    std::vector<Tensor*> trainable_parameters() {
        std::vector<Tensor*> out;
        if (!extractor_frozen) {
            for (Tensor* p : extractor.parameters()) out.push_back(p);
        }
        for (Tensor* p : projection.parameters()) out.push_back(p);
        for (Tensor* p : head.parameters()) out.push_back(p);
        return out;
    }

    std::vector<Tensor*> all_parameters() {
        std::vector<Tensor*> out;
        for (Tensor* p : extractor.parameters()) out.push_back(p);
        for (Tensor* p : projection.parameters()) out.push_back(p);
        for (Tensor* p : head.parameters()) out.push_back(p);
        return out;
    }

    bool all_finite() const {
        return extractor.all_finite() && projection.all_finite() && head.all_finite();
    }
};

// Projected features for a batch (n x common_dim).
inline Tensor features(const ProjectedNet& net, const Tensor& x) {
    return forward(net.projection, forward(net.extractor, x));
}

inline Tensor logits(const ProjectedNet& net, const Tensor& x) {
    return forward(net.head, features(net, x));
}

inline Tape::NodeId features(Tape& tape, ProjectedNet& net, const Tensor& x) {
    Tape::NodeId h = net.extractor_frozen
                         ? forward_frozen(tape, net.extractor, tape.constant(x))
                         : forward(tape, net.extractor, x);
    return forward(tape, net.projection, h);
}

inline Tape::NodeId logits_from_features(Tape& tape, ProjectedNet& net, Tape::NodeId feats) {
    return forward(tape, net.head, feats);
}

// Hidden stacks for the heterogeneous client pool; index 4 is the widest
// and doubles as the server architecture.
struct ArchitectureFamily {
    std::vector<std::size_t> hidden;
    std::size_t native_dim;
};

inline const std::array<ArchitectureFamily, 5>& architecture_families() {
    static const std::array<ArchitectureFamily, 5> families = {{
        {{16}, 8},
        {{32}, 16},
        {{32, 32}, 24},
        {{48}, 32},
        {{64, 64}, 48},
    }};
    return families;
}

inline ProjectedNet make_projected_net(std::size_t input_dim,
                                       const ArchitectureFamily& family,
                                       std::size_t common_dim, std::size_t class_count,
                                       std::uint64_t seed) {
    std::vector<std::size_t> dims = {input_dim};
    dims.insert(dims.end(), family.hidden.begin(), family.hidden.end());
    dims.push_back(family.native_dim);
    std::vector<Activation> acts(dims.size() - 1, Activation::kRelu);

    ProjectedNet net;
    net.extractor = make_dense_net(dims, acts, derive_seed(seed, 1));
    net.projection = make_dense_net({family.native_dim, common_dim},
                                    {Activation::kIdentity}, derive_seed(seed, 2));
    net.head = make_dense_net({common_dim, class_count}, {Activation::kIdentity},
                              derive_seed(seed, 3));
    return net;
}

inline ProjectedNet make_client_model(std::size_t family_index, std::size_t input_dim,
                                      std::size_t common_dim, std::size_t class_count,
                                      std::uint64_t seed) {
    const auto& families = architecture_families();
    return make_projected_net(input_dim, families[family_index % families.size()],
                              common_dim, class_count, seed);
}

inline ProjectedNet make_server_model(std::size_t input_dim, std::size_t common_dim,
                                      std::size_t class_count, std::uint64_t seed) {
    return make_projected_net(input_dim, architecture_families().back(), common_dim,
                              class_count, seed);
}

}  // namespace fedprotokd
