#include "fgd/model.hpp"

#include <cmath>

namespace fgd {
namespace {

constexpr std::pair<std::string_view, AggMode> kAgg[] = {
    {"concat", AggMode::concat}, {"mean", AggMode::mean}, {"attention", AggMode::attention}};
constexpr std::pair<std::string_view, PsiKind> kPsi[] = {
    {"identity", PsiKind::identity}, {"relu", PsiKind::relu}, {"mlp", PsiKind::mlp}};
constexpr std::pair<std::string_view, GroupEncoder> kEncoder[] = {
    {"mlp", GroupEncoder::mlp}, {"transformer", GroupEncoder::transformer}};

Tensor uniform(Shape shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = (2.0 * rng.uniform() - 1.0) * bound;
    return t;
}

// U(-b, b) with variance 1/fan_in. The smaller 1/sqrt(fan_in) bound left the
// attention layers too flat to start learning on the synthetic task.
double fan_in_bound(std::size_t fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); }

Var linear(Graph& g, Var x, Var w, Var b) { return g.add_row(g.matmul(x, w), b); }

}  // namespace

std::string_view to_string(AggMode v) {
    for (const auto& [n, e] : kAgg)
        if (e == v) return n;
    return "?";
}
std::string_view to_string(PsiKind v) {
    for (const auto& [n, e] : kPsi)
        if (e == v) return n;
    return "?";
}
std::string_view to_string(GroupEncoder v) {
    for (const auto& [n, e] : kEncoder)
        if (e == v) return n;
    return "?";
}
GroupEncoder parse_group_encoder(std::string_view s) {
    for (const auto& [n, e] : kEncoder)
        if (n == s) return e;
    throw std::invalid_argument("unknown group encoder '" + std::string(s) + "' (expected mlp or transformer)");
}
AggMode parse_agg_mode(std::string_view s) {
    for (const auto& [n, e] : kAgg)
        if (n == s) return e;
    throw std::invalid_argument("unknown aggregation '" + std::string(s) + "' (expected concat, mean or attention)");
}
PsiKind parse_psi_kind(std::string_view s) {
    for (const auto& [n, e] : kPsi)
        if (n == s) return e;
    throw std::invalid_argument("unknown feature nonlinearity '" + std::string(s) + "' (expected identity, relu or mlp)");
}

std::size_t Model::add(std::string name, Tensor value) {
    params_.emplace_back(std::move(name), std::move(value));
    return params_.size() - 1;
}

Model::Model(ModelOptions opts, Rng& rng) : opts_(std::move(opts)) {
    const std::size_t h = opts_.hidden;
    const std::size_t d = opts_.model_dim;
    if (opts_.layout.empty()) throw ModelError("model: no features");
    if (h == 0 || d == 0 || opts_.clusters == 0) throw ModelError("model: hidden, model_dim and clusters must be positive");
    if (opts_.heads == 0 || d % opts_.heads != 0) {
        throw ModelError("model: model_dim " + std::to_string(d) + " is not divisible by " + std::to_string(opts_.heads) + " heads");
    }

    for (std::size_t f = 0; f < opts_.layout.size(); ++f) {
        const std::size_t c = opts_.layout[f].width;
        if (c == 0) throw ModelError("model: feature " + std::to_string(f) + " has zero width");
        embed_idx_.push_back(add("embed." + std::to_string(f), uniform({c + 1, h}, fan_in_bound(h), rng)));
    }
    if (opts_.psi == PsiKind::mlp) {
        psi_idx_.push_back(add("psi.l1.weight", uniform({h, h}, fan_in_bound(h), rng)));
        psi_idx_.push_back(add("psi.l1.bias", uniform({h}, fan_in_bound(h), rng)));
        psi_idx_.push_back(add("psi.l2.weight", uniform({h, h}, fan_in_bound(h), rng)));
        psi_idx_.push_back(add("psi.l2.bias", uniform({h}, fan_in_bound(h), rng)));
    }
    if (opts_.group_encoder == GroupEncoder::transformer && h % opts_.heads != 0) {
        throw ModelError("model: hidden " + std::to_string(h) + " is not divisible by " + std::to_string(opts_.heads) + " heads");
    }
    for (std::size_t k = 0; k < opts_.clusters; ++k) {
        const std::string p = "group." + std::to_string(k);
        if (opts_.group_encoder == GroupEncoder::mlp) {
            group_idx_.push_back({add(p + ".l1.weight", uniform({h, h}, fan_in_bound(h), rng)),
                                  add(p + ".l1.bias", uniform({h}, fan_in_bound(h), rng)),
                                  add(p + ".l2.weight", uniform({h, h}, fan_in_bound(h), rng)),
                                  add(p + ".l2.bias", uniform({h}, fan_in_bound(h), rng))});
        } else {
            std::vector<std::size_t> idx;
            for (const char* w : {".q.weight", ".k.weight", ".v.weight", ".o.weight"})
                idx.push_back(add(p + w, uniform({h, h}, fan_in_bound(h), rng)));
            idx.push_back(add(p + ".o.bias", uniform({h}, fan_in_bound(h), rng)));
            idx.push_back(add(p + ".ff1.weight", uniform({h, h}, fan_in_bound(h), rng)));
            idx.push_back(add(p + ".ff1.bias", uniform({h}, fan_in_bound(h), rng)));
            idx.push_back(add(p + ".ff2.weight", uniform({h, h}, fan_in_bound(h), rng)));
            idx.push_back(add(p + ".ff2.bias", uniform({h}, fan_in_bound(h), rng)));
            group_idx_.push_back(std::move(idx));
        }
    }
    query_idx_ = add("agg.query", uniform({h, 1}, fan_in_bound(h), rng));

    const std::size_t gw = group_output_width();
    seq_idx_ = {add("seq.in.weight", uniform({gw, d}, fan_in_bound(gw), rng)),
                add("seq.in.bias", uniform({d}, fan_in_bound(gw), rng)),
                add("seq.q.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.k.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.v.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.o.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.o.bias", uniform({d}, fan_in_bound(d), rng)),
                add("seq.ff1.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.ff1.bias", uniform({d}, fan_in_bound(d), rng)),
                add("seq.ff2.weight", uniform({d, d}, fan_in_bound(d), rng)),
                add("seq.ff2.bias", uniform({d}, fan_in_bound(d), rng)),
                add("head.weight", uniform({d, 1}, fan_in_bound(d), rng)),
                add("head.bias", uniform({1}, fan_in_bound(d), rng))};
}

std::size_t Model::group_output_width() const {
    return opts_.agg == AggMode::concat ? opts_.clusters * opts_.hidden : opts_.hidden;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& p : params_) out.push_back(&p);
    return out;
}

std::vector<Parameter*> Model::embedding_parameters() {
    std::vector<Parameter*> out;
    for (auto i : embed_idx_) out.push_back(&params_[i]);
    return out;
}

std::vector<Tensor> Model::embedding_weights() const {
    std::vector<Tensor> out;
    for (auto i : embed_idx_) out.push_back(params_[i].value);
    return out;
}

Parameter& Model::parameter(std::string_view name) {
    for (auto& p : params_)
        if (p.name == name) return p;
    throw ModelError("model: no parameter named '" + std::string(name) + "'");
}

void Model::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

namespace {

template <class Leaf>
ModelVars bind_with(const ModelOptions& opts, const std::vector<std::size_t>& embed_idx,
                    const std::vector<std::size_t>& psi_idx, const std::vector<std::vector<std::size_t>>& group_idx,
                    std::size_t query_idx, const std::vector<std::size_t>& seq_idx, Leaf leaf) {
    ModelVars v;
    for (auto i : embed_idx) v.embed.push_back(leaf(i));
    for (auto i : psi_idx) v.psi.push_back(leaf(i));
    for (const auto& grp : group_idx) {
        std::vector<Var> vars;
        for (auto i : grp) vars.push_back(leaf(i));
        v.group.push_back(std::move(vars));
    }
    if (opts.agg == AggMode::attention) v.query = leaf(query_idx);
    Var* seq[] = {&v.in_w, &v.in_b, &v.q_w, &v.k_w, &v.v_w, &v.o_w, &v.o_b,
                  &v.ff1_w, &v.ff1_b, &v.ff2_w, &v.ff2_b, &v.head_w, &v.head_b};
    for (std::size_t i = 0; i < seq_idx.size(); ++i) *seq[i] = leaf(seq_idx[i]);
    return v;
}

}  // namespace

ModelVars Model::bind(Graph& g) {
    return bind_with(opts_, embed_idx_, psi_idx_, group_idx_, query_idx_, seq_idx_,
                     [&](std::size_t i) { return g.parameter(params_[i]); });
}

ModelVars Model::bind_constants(Graph& g) const {
    return bind_with(opts_, embed_idx_, psi_idx_, group_idx_, query_idx_, seq_idx_,
                     [&](std::size_t i) { return g.constant(params_[i].value); });
}

std::vector<Var> Model::feature_embed(Graph& g, const ModelVars& vars, Var x) const {
    const Tensor& xv = g.value(x);
    const std::size_t width = encoded_width(opts_.layout);
    if (xv.ndim() != 2 || xv.cols() != width) {
        throw ShapeError("feature_embed: input " + to_string(xv.shape()) + " does not match encoded width " + std::to_string(width));
    }
    std::vector<Var> tokens;
    std::size_t offset = 0;
    for (std::size_t f = 0; f < opts_.layout.size(); ++f) {
        const std::size_t c = opts_.layout[f].width;
        const Var xf = g.slice_cols(x, offset, offset + c);
        offset += c;
        const Var w = g.slice_rows(vars.embed[f], 0, c);
        const Var b = g.slice_rows(vars.embed[f], c, c + 1);
        Var e = g.add_row(g.matmul(xf, w), b);
        switch (opts_.psi) {
            case PsiKind::identity: break;
            case PsiKind::relu: e = g.relu(e); break;
            case PsiKind::mlp:
                e = linear(g, g.relu(linear(g, e, vars.psi[0], vars.psi[1])), vars.psi[2], vars.psi[3]);
                break;
        }
        tokens.push_back(e);
    }
    return tokens;
}

Var Model::group_embed(Graph& g, const ModelVars& vars, std::span<const Var> tokens, const MembershipMatrix& m) const {
    if (m.features() != tokens.size() || m.clusters() != opts_.clusters) {
        throw ShapeError("group_embed: membership " + std::to_string(m.features()) + "x" + std::to_string(m.clusters()) +
                         " for " + std::to_string(tokens.size()) + " features and " + std::to_string(opts_.clusters) + " groups");
    }
    std::vector<Var> groups;
    for (std::size_t k = 0; k < opts_.clusters; ++k) {
        const std::vector<std::size_t> members = m.members(k);
        if (members.empty()) throw ModelError("group_embed: group " + std::to_string(k) + " is empty");
        const auto& p = vars.group[k];
        if (opts_.group_encoder == GroupEncoder::transformer) {
            // rows (r, member) so that attention runs over the members of each row r
            std::vector<Var> parts;
            for (auto f : members) parts.push_back(tokens[f]);
            const std::size_t n = members.size();
            const std::size_t rows = g.value(parts[0]).rows();
            Var x = n == 1 ? parts[0] : g.reshape(g.concat_cols(parts), {rows * n, opts_.hidden});
            const Var a = g.attention(g.matmul(x, p[0]), g.matmul(x, p[1]), g.matmul(x, p[2]), n, opts_.heads);
            x = g.add(x, linear(g, a, p[3], p[4]));
            x = g.add(x, linear(g, g.relu(linear(g, x, p[5], p[6])), p[7], p[8]));
            groups.push_back(n == 1 ? x : g.mean_pool(x, n));
            continue;
        }
        Var acc = tokens[members[0]];
        for (std::size_t i = 1; i < members.size(); ++i) acc = g.add(acc, tokens[members[i]]);
        if (members.size() > 1) acc = g.scale(acc, 1.0 / static_cast<double>(members.size()));
        groups.push_back(linear(g, g.relu(linear(g, acc, p[0], p[1])), p[2], p[3]));
    }
    switch (opts_.agg) {
        case AggMode::concat:
            return groups.size() == 1 ? groups[0] : g.concat_cols(groups);
        case AggMode::mean: {
            Var acc = groups[0];
            for (std::size_t k = 1; k < groups.size(); ++k) acc = g.add(acc, groups[k]);
            return groups.size() == 1 ? acc : g.scale(acc, 1.0 / static_cast<double>(groups.size()));
        }
        case AggMode::attention: {
            const double inv = 1.0 / std::sqrt(static_cast<double>(opts_.hidden));
            std::vector<Var> logits;
            for (Var grp : groups) logits.push_back(g.scale(g.matmul(grp, vars.query), inv));
            const Var attn = g.softmax_rows(g.concat_cols(logits));
            Var acc;
            for (std::size_t k = 0; k < groups.size(); ++k) {
                const Var term = g.mul_col(groups[k], g.slice_cols(attn, k, k + 1));
                acc = k == 0 ? term : g.add(acc, term);
            }
            return acc;
        }
    }
    throw ModelError("group_embed: unknown aggregation");
}

Var Model::sequence_forward(Graph& g, const ModelVars& vars, Var steps_embedding, std::size_t steps) const {
    const Tensor& sv = g.value(steps_embedding);
    if (steps == 0 || sv.rows() % steps != 0) {
        throw ShapeError("sequence_forward: " + std::to_string(sv.rows()) + " rows for " + std::to_string(steps) + " steps");
    }
    Var z = linear(g, steps_embedding, vars.in_w, vars.in_b);
    if (opts_.positional_encoding) {
        z = g.add(z, g.constant(positional_encoding(sv.rows() / steps, steps, opts_.model_dim)));
    }
    const Var attn = g.attention(g.matmul(z, vars.q_w), g.matmul(z, vars.k_w), g.matmul(z, vars.v_w), steps, opts_.heads);
    const Var z1 = g.add(z, linear(g, attn, vars.o_w, vars.o_b));
    const Var ff = linear(g, g.relu(linear(g, z1, vars.ff1_w, vars.ff1_b)), vars.ff2_w, vars.ff2_b);
    const Var z2 = g.add(z1, ff);
    return linear(g, g.mean_pool(z2, steps), vars.head_w, vars.head_b);
}

Var Model::forward(Graph& g, const ModelVars& vars, const Tensor& batch, const MembershipMatrix& m) const {
    if (batch.ndim() != 3) throw ShapeError("forward: expected [samples, steps, width] batch, got " + to_string(batch.shape()));
    validate_inputs(batch);
    const std::size_t steps = batch.shape()[1];
    const Var x = g.constant(batch.reshaped({batch.shape()[0] * steps, batch.shape()[2]}));
    const std::vector<Var> tokens = feature_embed(g, vars, x);
    return sequence_forward(g, vars, group_embed(g, vars, tokens, m), steps);
}

void Model::validate_inputs(const Tensor& batch) const {
    const std::size_t width = encoded_width(opts_.layout);
    if (batch.size() % width != 0 || (batch.ndim() >= 2 && batch.shape().back() != width)) {
        throw ShapeError("model input " + to_string(batch.shape()) + " does not match encoded width " + std::to_string(width));
    }
    bool any_categorical = false;
    for (const auto& s : opts_.layout) any_categorical |= s.categorical;
    if (!any_categorical) return;
    const std::size_t rows = batch.size() / width;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t offset = 0;
        for (std::size_t f = 0; f < opts_.layout.size(); ++f) {
            const FeatureSpec& s = opts_.layout[f];
            if (s.categorical) {
                double total = 0.0;
                for (std::size_t j = 0; j < s.width; ++j) {
                    const double v = batch[r * width + offset + j];
                    if (v != 0.0 && v != 1.0) throw ModelError("feature " + std::to_string(f) + ": one-hot entry is neither 0 nor 1");
                    total += v;
                }
                if (total != 1.0) throw ModelError("feature " + std::to_string(f) + ": one-hot vector does not sum to 1");
            }
            offset += s.width;
        }
    }
}

NamedTensors Model::state() const {
    NamedTensors out;
    for (const auto& p : params_) out.emplace_back(p.name, p.value);
    return out;
}

void Model::load_state(const NamedTensors& tensors) {
    for (auto& p : params_) {
        bool found = false;
        for (const auto& [name, t] : tensors) {
            if (name != p.name) continue;
            if (t.shape() != p.value.shape()) {
                throw ShapeError("load_state: '" + name + "' has shape " + to_string(t.shape()) + ", expected " + to_string(p.value.shape()));
            }
            p.value = t;
            found = true;
            break;
        }
        if (!found) throw ModelError("load_state: missing tensor '" + p.name + "'");
    }
}

Var supervised_loss(Graph& g, Var logits, const Tensor& labels) {
    for (double y : labels.values())
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("supervised_loss: labels must be 0 or 1");
    return g.bce_with_logits(logits, labels);
}

Tensor positional_encoding(std::size_t samples, std::size_t steps, std::size_t dim) {
    Tensor pe({samples * steps, dim});
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(dim));
            const double v = (j % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
            for (std::size_t s = 0; s < samples; ++s) pe.at(s * steps + t, j) = v;
        }
    }
    return pe;
}

}  // namespace fgd
