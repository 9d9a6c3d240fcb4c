#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fgd/autodiff.hpp"
#include "fgd/membership.hpp"
#include "fgd/rng.hpp"

namespace fgd {

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class AggMode { concat, mean, attention };
/// Shared nonlinearity applied to every feature token after its linear layer.
enum class PsiKind { identity, relu, mlp };
/// Per-group network phi_k: mean of the member tokens followed by an MLP, or
/// one self-attention block over the member tokens followed by a token mean.
enum class GroupEncoder { mlp, transformer };

std::string_view to_string(AggMode v);
std::string_view to_string(PsiKind v);
std::string_view to_string(GroupEncoder v);
AggMode parse_agg_mode(std::string_view s);
PsiKind parse_psi_kind(std::string_view s);
GroupEncoder parse_group_encoder(std::string_view s);

struct ModelOptions {
    FeatureLayout layout;
    std::size_t hidden = 6;  // token width H
    std::size_t clusters = 3;
    AggMode agg = AggMode::concat;
    PsiKind psi = PsiKind::mlp;
    GroupEncoder group_encoder = GroupEncoder::mlp;
    std::size_t model_dim = 6;  // sequence head width
    std::size_t heads = 2;
    bool positional_encoding = false;
};

/// Graph leaves for every model parameter, bound once per graph.
struct ModelVars {
    std::vector<Var> embed;  // per-feature W_f, (C_f + 1) x H
    std::vector<Var> psi;    // l1.weight, l1.bias, l2.weight, l2.bias (mlp only)
    std::vector<std::vector<Var>> group;  // mlp: l1 w, b, l2 w, b; transformer: q, k, v, o w, o b, ff1 w, b, ff2 w, b
    Var query;  // attention pooling
    Var in_w, in_b, q_w, k_w, v_w, o_w, o_b, ff1_w, ff1_b, ff2_w, ff2_b, head_w, head_b;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Step-wise embedding classifier with grouped feature tokens.
///
/// Rows of every activation are (sample, step) pairs in sample-major order,
/// so a batch of B series of length T is a [B*T, width] matrix.
class Model {
public:
    Model() = default;
    Model(ModelOptions opts, Rng& rng);

    const ModelOptions& options() const noexcept { return opts_; }
    std::size_t features() const noexcept { return opts_.layout.size(); }

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    /// Feature-wise embedding matrices W_f in feature order.
    std::vector<Parameter*> embedding_parameters();
    std::vector<Tensor> embedding_weights() const;
    Parameter& parameter(std::string_view name);
    void zero_grad();

    ModelVars bind(Graph& g);
    /// Binds parameter values as constants, for inference without gradients.
    ModelVars bind_constants(Graph& g) const;

    /// Per-feature tokens h_f, each [R, H], from encoded inputs x [R, sum C_f].
    std::vector<Var> feature_embed(Graph& g, const ModelVars& vars, Var x) const;
    /// Splits tokens by group, embeds each group, aggregates: [R, agg width].
    Var group_embed(Graph& g, const ModelVars& vars, std::span<const Var> tokens, const MembershipMatrix& m) const;
    /// Self-attention over steps, mean pool, linear head: [B, 1] logits.
    Var sequence_forward(Graph& g, const ModelVars& vars, Var steps_embedding, std::size_t steps) const;
    /// Full forward pass over a [B, T, sum C_f] input batch.
    Var forward(Graph& g, const ModelVars& vars, const Tensor& batch, const MembershipMatrix& m) const;

    std::size_t group_output_width() const;

    NamedTensors state() const;
    void load_state(const NamedTensors& tensors);

    /// Throws ModelError if a categorical block is not one-hot.
    void validate_inputs(const Tensor& batch) const;

private:
    std::size_t add(std::string name, Tensor value);

    ModelOptions opts_;
    std::vector<Parameter> params_;
    std::vector<std::size_t> embed_idx_;
    std::vector<std::size_t> psi_idx_;
    std::vector<std::vector<std::size_t>> group_idx_;
    std::size_t query_idx_ = 0;
    std::vector<std::size_t> seq_idx_;
};

/// Mean binary cross-entropy of sigmoid(logits) against labels in {0, 1}.
Var supervised_loss(Graph& g, Var logits, const Tensor& labels);

/// Sinusoidal encoding tiled over samples: [samples*steps, dim].
Tensor positional_encoding(std::size_t samples, std::size_t steps, std::size_t dim);

}  // namespace fgd
