#include "fgd/config.hpp"

#include <cstdio>
#include <set>

#include "fgd/io.hpp"

namespace fgd {
namespace {

using json = nlohmann::json;

constexpr std::pair<std::string_view, InitMode> kInitModes[] = {
    {"kmeanspp", InitMode::kmeanspp}, {"prior", InitMode::prior}, {"ground_truth", InitMode::ground_truth}};
constexpr std::pair<std::string_view, ReclusterUnit> kUnits[] = {{"batch", ReclusterUnit::batch},
                                                                 {"epoch", ReclusterUnit::epoch}};

/// Strict object reader: every get() marks a key as consumed and finish()
/// rejects anything left over.
class Reader {
public:
    Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <class T>
    T get(const std::string& key) {
        seen_.insert(key);
        const auto it = obj_.find(key);
        if (it == obj_.end()) throw ConfigError("missing field '" + name(key) + "'");
        try {
            return it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError("field '" + name(key) + "' has the wrong type");
        }
    }

    template <class E, class Parse>
    E get_enum(const std::string& key, Parse parse) {
        const auto s = get<std::string>(key);
        try {
            return parse(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("field '" + name(key) + "': " + e.what());
        }
    }

    Reader child(const std::string& key) {
        seen_.insert(key);
        const auto it = obj_.find(key);
        if (it == obj_.end()) throw ConfigError("missing field '" + name(key) + "'");
        return Reader(*it, name(key));
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        const auto it = obj_.find(key);
        if (it == obj_.end()) throw ConfigError("missing field '" + name(key) + "'");
        return *it;
    }

    void finish() const {
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) throw ConfigError("unknown field '" + name(k) + "'");
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class T>
void require(bool ok, const char* field, const T& detail) {
    if (!ok) throw ConfigError(std::string("invalid field '") + field + "': " + detail);
}

}  // namespace

std::string_view to_string(InitMode v) {
    for (const auto& [n, e] : kInitModes)
        if (e == v) return n;
    return "?";
}

std::string_view to_string(ReclusterUnit v) {
    for (const auto& [n, e] : kUnits)
        if (e == v) return n;
    return "?";
}

InitMode parse_init_mode(std::string_view s) {
    for (const auto& [n, e] : kInitModes)
        if (n == s) return e;
    throw std::invalid_argument("unknown init mode '" + std::string(s) + "' (expected kmeanspp, prior or ground_truth)");
}

ReclusterUnit parse_recluster_unit(std::string_view s) {
    for (const auto& [n, e] : kUnits)
        if (n == s) return e;
    throw std::invalid_argument("unknown recluster unit '" + std::string(s) + "' (expected batch or epoch)");
}

void ExperimentConfig::validate() const {
    try {
        data.gp.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid field 'data': ") + e.what());
    }
    const std::size_t f = data.gp.features();
    require(model.hidden >= 1, "model.hidden", "must be at least 1");
    require(model.model_dim >= 1, "model.model_dim", "must be at least 1");
    require(model.heads >= 1 && model.model_dim % model.heads == 0, "model.heads", "must divide model.model_dim");
    require(model.group_encoder != GroupEncoder::transformer || model.hidden % model.heads == 0, "model.heads",
            "must divide model.hidden for the transformer group encoder");

    const auto& g = grouping;
    require(g.clusters >= 1, "grouping.clusters", "must be at least 1");
    require(g.clusters <= f, "grouping.clusters", "cannot exceed the feature count");
    require(g.delta >= 0.0 && g.delta < 1.0, "grouping.delta", "must lie in [0, 1)");
    require(g.alpha >= 0.0 && g.alpha < 1.0, "grouping.alpha", "must lie in [0, 1)");
    require(g.lambda >= 0.0 && g.lambda < 1.0, "grouping.lambda", "must lie in [0, 1)");
    require(!g.period || *g.period >= 1, "grouping.period", "must be at least 1 or \"never\"");
    require(g.fuzzifier > 1.0, "grouping.fuzzifier", "must exceed 1");
    require(!(g.membership == MembershipMode::soft && g.algorithm == ClusterKind::kmeans), "grouping.membership",
            "soft membership needs graded scores (fuzzy or gmm), not kmeans");
    if (g.init == InitMode::prior) {
        require(g.prior.size() == g.clusters, "grouping.prior", "needs one group per cluster");
        std::vector<int> seen(f, 0);
        for (const auto& group : g.prior) {
            require(!group.empty(), "grouping.prior", "groups must be non-empty");
            for (auto i : group) {
                require(i < f, "grouping.prior", "feature index out of range");
                ++seen[i];
            }
        }
        for (int s : seen) require(s == 1, "grouping.prior", "every feature must appear in exactly one group");
    }
    if (g.init == InitMode::ground_truth) {
        require(g.clusters == (f + 1) / 2, "grouping.clusters", "must match the ground-truth group count");
    }

    require(train.lr > 0.0, "train.lr", "must be positive");
    require(train.epochs >= 1, "train.epochs", "must be at least 1");
    require(train.batch_size >= 1, "train.batch_size", "must be at least 1");
    require(train.chunk >= 1, "train.chunk", "must be at least 1");
    require(train.val_fraction > 0.0 && train.test_fraction >= 0.0 && train.val_fraction + train.test_fraction < 1.0,
            "train.val_fraction", "validation and test fractions must leave training data");
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["schema"] = kConfigSchema;
    j["seed"] = c.seed;
    j["data"] = {{"path", c.data.path},
                 {"samples", c.data.gp.samples},
                 {"length", c.data.gp.length},
                 {"length_scales", c.data.gp.length_scales},
                 {"amplitudes", c.data.gp.amplitudes},
                 {"standardize", c.data.standardize}};
    j["model"] = {{"hidden", c.model.hidden},
                  {"model_dim", c.model.model_dim},
                  {"heads", c.model.heads},
                  {"psi", to_string(c.model.psi)},
                  {"group_encoder", to_string(c.model.group_encoder)},
                  {"agg", to_string(c.model.agg)},
                  {"positional_encoding", c.model.positional_encoding}};
    const auto& g = c.grouping;
    nlohmann::ordered_json period = g.period ? nlohmann::ordered_json(*g.period) : nlohmann::ordered_json("never");
    j["grouping"] = {{"clusters", g.clusters},
                     {"algorithm", to_string(g.algorithm)},
                     {"membership", to_string(g.membership)},
                     {"delta", g.delta},
                     {"alpha", g.alpha},
                     {"ema_rule", to_string(g.ema_rule)},
                     {"fuzzifier", g.fuzzifier},
                     {"covariance_type", to_string(g.covariance_type)},
                     {"combine", to_string(g.combine)},
                     {"init", to_string(g.init)},
                     {"prior", g.prior},
                     {"reg_variant", to_string(g.reg_variant)},
                     {"lambda", g.lambda},
                     {"period", period},
                     {"recluster_unit", to_string(g.recluster_unit)}};
    j["train"] = {{"lr", c.train.lr},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"patience", c.train.patience},
                  {"val_fraction", c.train.val_fraction},
                  {"test_fraction", c.train.test_fraction},
                  {"chunk", c.train.chunk}};
    return j;
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    Reader root(j, "");
    const auto schema = root.get<std::string>("schema");
    if (schema != kConfigSchema) throw ConfigError("field 'schema': expected " + std::string(kConfigSchema));
    c.seed = root.get<std::uint64_t>("seed");

    Reader d = root.child("data");
    c.data.path = d.get<std::string>("path");
    c.data.gp.samples = d.get<std::size_t>("samples");
    c.data.gp.length = d.get<std::size_t>("length");
    c.data.gp.length_scales = d.get<std::vector<double>>("length_scales");
    c.data.gp.amplitudes = d.get<std::vector<double>>("amplitudes");
    c.data.standardize = d.get<bool>("standardize");
    d.finish();

    Reader m = root.child("model");
    c.model.hidden = m.get<std::size_t>("hidden");
    c.model.model_dim = m.get<std::size_t>("model_dim");
    c.model.heads = m.get<std::size_t>("heads");
    c.model.psi = m.get_enum<PsiKind>("psi", parse_psi_kind);
    c.model.group_encoder = m.get_enum<GroupEncoder>("group_encoder", parse_group_encoder);
    c.model.agg = m.get_enum<AggMode>("agg", parse_agg_mode);
    c.model.positional_encoding = m.get<bool>("positional_encoding");
    m.finish();

    Reader g = root.child("grouping");
    auto& gc = c.grouping;
    gc.clusters = g.get<std::size_t>("clusters");
    gc.algorithm = g.get_enum<ClusterKind>("algorithm", parse_cluster_kind);
    gc.membership = g.get_enum<MembershipMode>("membership", parse_membership_mode);
    gc.delta = g.get<double>("delta");
    gc.alpha = g.get<double>("alpha");
    gc.ema_rule = g.get_enum<EmaRule>("ema_rule", parse_ema_rule);
    gc.fuzzifier = g.get<double>("fuzzifier");
    gc.covariance_type = g.get_enum<CovarianceType>("covariance_type", parse_covariance_type);
    gc.combine = g.get_enum<CombineMode>("combine", parse_combine_mode);
    gc.init = g.get_enum<InitMode>("init", parse_init_mode);
    gc.prior = g.get<std::vector<std::vector<std::size_t>>>("prior");
    gc.reg_variant = g.get_enum<RegVariant>("reg_variant", parse_reg_variant);
    gc.lambda = g.get<double>("lambda");
    const json& period = g.raw("period");
    if (period.is_string() && period.get<std::string>() == "never") gc.period.reset();
    else if (period.is_number_unsigned()) gc.period = period.get<std::size_t>();
    else throw ConfigError("field 'grouping.period' must be a positive integer or \"never\"");
    gc.recluster_unit = g.get_enum<ReclusterUnit>("recluster_unit", parse_recluster_unit);
    g.finish();

    Reader t = root.child("train");
    c.train.lr = t.get<double>("lr");
    c.train.epochs = t.get<std::size_t>("epochs");
    c.train.batch_size = t.get<std::size_t>("batch_size");
    c.train.patience = t.get<std::size_t>("patience");
    c.train.val_fraction = t.get<double>("val_fraction");
    c.train.test_fraction = t.get<double>("test_fraction");
    c.train.chunk = t.get<std::size_t>("chunk");
    t.finish();
    root.finish();

    c.validate();
    return c;
}

void apply_override(nlohmann::json& j, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' must have the form key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part)) throw ConfigError("override names unknown field '" + key + "'");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    json value = json::parse(text, nullptr, false);
    *node = value.is_discarded() ? json(text) : std::move(value);
}

ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
    std::string text;
    try {
        text = read_text(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // byte offset -> line number
        std::size_t line = 1;
        for (std::size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ConfigError(path.string() + ":" + std::to_string(line) + ": " + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
    const std::string text = to_json(c).dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace fgd
