#pragma once

// Small multilayer perceptrons: the parameterization for every learnable map
// in the bundle (latent encoders/decoders, generator, discriminators).

#include <string>
#include <vector>

#include "csdi/rng.hpp"
#include "csdi/tape.hpp"
#include "csdi/tensor.hpp"

namespace csdi {

enum class Head { linear, tanh_scaled, sigmoid };

struct MlpSpec {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t width = 64;
    std::size_t hidden_layers = 2;  // number of hidden layers; total affine layers = hidden+1
    Head head = Head::linear;
    double head_scale = 1.0;  // output multiplier for tanh_scaled heads
    double leaky_slope = 0.2;
};

struct Mlp {
    MlpSpec spec;
    std::vector<Tensor> W;  // W[l]: (out_l x in_l), row-major
    std::vector<Tensor> b;  // b[l]: (1 x out_l)

    static Mlp init(const MlpSpec& spec, Rng& rng) {
        Mlp net;
        net.spec = spec;
        std::vector<std::size_t> dims;
        dims.push_back(spec.in);
        for (std::size_t l = 0; l < spec.hidden_layers; ++l) dims.push_back(spec.width);
        dims.push_back(spec.out);
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
            const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            Tensor w(fan_out, fan_in);
            for (double& x : w.v) x = rng.uniform(-a, a);
            net.W.push_back(std::move(w));
            net.b.push_back(Tensor::zeros(1, fan_out));
        }
        return net;
    }

    std::size_t layers() const { return W.size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& w : W) n += w.numel();
        for (const auto& bb : b) n += bb.numel();
        return n;
    }
};

// A network whose parameters have been inserted into a tape as leaves.
// forward() threads a batch (B x in) through the recorded graph.
struct BoundMlp {
    const Mlp* net = nullptr;
    std::vector<ad::Var> Wv, bv;

    ad::Var forward(ad::Tape& tape, ad::Var x) const {
        ad::Var h = x;
        for (std::size_t l = 0; l < net->W.size(); ++l) {
            h = tape.add_rowvec(tape.matmul(h, Wv[l], ad::Op::matmul_nt), bv[l]);
            if (l + 1 < net->W.size()) h = tape.leaky_relu(h, net->spec.leaky_slope);
        }
        switch (net->spec.head) {
            case Head::linear: break;
            case Head::tanh_scaled: h = tape.scale(tape.tanh(h), net->spec.head_scale); break;
            case Head::sigmoid: h = tape.sigmoid(h); break;
        }
        return h;
    }
};

inline BoundMlp bind(ad::Tape& tape, const Mlp& net, bool needs_grad) {
    BoundMlp bound;
    bound.net = &net;
    bound.Wv.reserve(net.W.size());
    bound.bv.reserve(net.b.size());
    for (std::size_t l = 0; l < net.W.size(); ++l) {
        bound.Wv.push_back(tape.leaf(net.W[l], needs_grad));
        bound.bv.push_back(tape.leaf(net.b[l], needs_grad));
    }
    return bound;
}

// Numeric forward pass without keeping a caller-visible tape.
inline Tensor mlp_eval(const Mlp& net, const Tensor& x) {
    ad::Tape tape;
    ad::Var in = tape.leaf(x, false);
    BoundMlp bound = bind(tape, net, false);
    return tape.value(bound.forward(tape, in));
}

}  // namespace csdi
