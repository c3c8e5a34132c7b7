#include "optolab/config_json.hpp"

#include <cstdio>
#include <set>

namespace optolab {

namespace {

std::string type_of(const Json& j) { return j.type_name(); }

class Reader {
public:
    Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j.is_object()) throw ConfigError(where_ + ": expected an object, got " + type_of(j));
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        read(*it, out, where_ + "." + key);
    }

    bool has(const char* key) const { return j_.contains(key); }
    const Json& raw(const char* key) {
        seen_.insert(key);
        return j_.at(key);
    }

    void done() const {
        std::string unknown;
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) unknown += (unknown.empty() ? "" : ", ") + where_ + "." + it.key();
        if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
    }

    static void read(const Json& v, std::size_t& out, const std::string& path) {
        if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer, got " + v.dump());
        out = v.get<std::size_t>();
    }
    static void read(const Json& v, int& out, const std::string& path) {
        if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer, got " + v.dump());
        out = v.get<int>();
    }
    static void read(const Json& v, double& out, const std::string& path) {
        if (!v.is_number()) throw ConfigError(path + ": expected a number, got " + v.dump());
        out = v.get<double>();
    }
    static void read(const Json& v, bool& out, const std::string& path) {
        if (!v.is_boolean()) throw ConfigError(path + ": expected true or false, got " + v.dump());
        out = v.get<bool>();
    }
    static void read(const Json& v, std::string& out, const std::string& path) {
        if (!v.is_string()) throw ConfigError(path + ": expected a string, got " + v.dump());
        out = v.get<std::string>();
    }
    template <class T>
    static void read(const Json& v, std::vector<T>& out, const std::string& path) {
        if (!v.is_array()) throw ConfigError(path + ": expected an array, got " + v.dump());
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T x{};
            read(v[i], x, path + "[" + std::to_string(i) + "]");
            out.push_back(x);
        }
    }

private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

}  // namespace

Json to_json(const WorldConfig& c) {
    return Json{{"train_classes", c.train_classes},     {"test_classes", c.test_classes},
                {"exemplars_per_class", c.exemplars_per_class}, {"labels", c.labels},
                {"train_pair_fraction", c.train_pair_fraction}, {"exemplar_dim", c.exemplar_dim},
                {"seed", c.seed}};
}

void from_json(const Json& j, WorldConfig& c, const std::string& where) {
    Reader r(j, where);
    r.get("train_classes", c.train_classes);
    r.get("test_classes", c.test_classes);
    r.get("exemplars_per_class", c.exemplars_per_class);
    r.get("labels", c.labels);
    r.get("train_pair_fraction", c.train_pair_fraction);
    r.get("exemplar_dim", c.exemplar_dim);
    r.get("seed", c.seed);
    r.done();
}

Json to_json(const ModelConfig& c) {
    return Json{{"d_model", c.d_model},     {"n_layers", c.n_layers},   {"heads", c.heads},
                {"n_labels", c.n_labels},   {"exemplar_dim", c.exemplar_dim}, {"rope_base", c.rope_base},
                {"ln_eps", c.ln_eps}};
}

void from_json(const Json& j, ModelConfig& c, const std::string& where) {
    Reader r(j, where);
    r.get("d_model", c.d_model);
    r.get("n_layers", c.n_layers);
    r.get("heads", c.heads);
    r.get("n_labels", c.n_labels);
    r.get("exemplar_dim", c.exemplar_dim);
    r.get("rope_base", c.rope_base);
    r.get("ln_eps", c.ln_eps);
    r.done();
}

Json to_json(const AdamConfig& c) {
    return Json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const Json& j, AdamConfig& c, const std::string& where) {
    Reader r(j, where);
    r.get("lr", c.lr);
    r.get("beta1", c.beta1);
    r.get("beta2", c.beta2);
    r.get("eps", c.eps);
    r.done();
}

Json to_json(const ClampSpec& c) {
    Json j{{"kind", clamp_kind_name(c.kind)}};
    switch (c.kind) {
        case ClampKind::PtAttend: j["heads"] = c.heads; break;
        case ClampKind::HeadKnockout:
            j["layer"] = c.layer;
            j["heads"] = c.heads;
            break;
        case ClampKind::IhMatch:
            j["head"] = c.head;
            j["strength"] = c.strength;
            break;
        case ClampKind::Copy: j["head"] = c.head; break;
        case ClampKind::Layer1AndCopy:
            j["head"] = c.head;
            [[fallthrough]];
        case ClampKind::Layer1Full:
            j["pattern_policy"] = c.pattern_policy == GradPolicy::Flow ? "flow" : "constant";
            break;
        case ClampKind::DonorGraft: j["donor"] = c.donor_path; break;
    }
    j["start_step"] = c.start_step;
    if (c.end_step == ClampSpec{}.end_step) j["end_step"] = nullptr;
    else j["end_step"] = c.end_step;
    return j;
}

void from_json(const Json& j, ClampSpec& c, const std::string& where) {
    Reader r(j, where);
    if (!r.has("kind")) throw ConfigError(where + ": missing 'kind'");
    std::string kind;
    r.get("kind", kind);
    c.kind = parse_clamp_kind(kind);
    r.get("heads", c.heads);
    r.get("layer", c.layer);
    r.get("head", c.head);
    r.get("strength", c.strength);
    if (r.has("pattern_policy")) {
        std::string p;
        r.get("pattern_policy", p);
        if (p == "flow") c.pattern_policy = GradPolicy::Flow;
        else if (p == "constant") c.pattern_policy = GradPolicy::Constant;
        else throw ConfigError(where + ".pattern_policy: expected 'flow' or 'constant', got '" + p + "'");
    }
    r.get("donor", c.donor_path);
    r.get("start_step", c.start_step);
    if (r.has("end_step") && !r.raw("end_step").is_null()) r.get("end_step", c.end_step);
    r.done();
}

Json to_json(const ToyConfig& c) {
    Json clamp = Json::array();
    if (c.clamp_a) clamp.push_back("a");
    if (c.clamp_b) clamp.push_back("b");
    if (c.clamp_c) clamp.push_back("c");
    Json j{{"n_a", c.n_a},     {"n_b", c.n_b},   {"n_c", c.n_c},           {"n_vectors", c.n_vectors},
           {"lr", c.lr},       {"steps", c.steps}, {"clamp", clamp},       {"init_std", c.init_std},
           {"seed", c.seed},   {"record_every", c.record_every}};
    if (!c.truth.a.empty()) j["truth"] = Json{{"a", c.truth.a}, {"b", c.truth.b}, {"c", c.truth.c}};
    return j;
}

void from_json(const Json& j, ToyConfig& c, const std::string& where) {
    Reader r(j, where);
    r.get("n_a", c.n_a);
    r.get("n_b", c.n_b);
    r.get("n_c", c.n_c);
    r.get("n_vectors", c.n_vectors);
    r.get("lr", c.lr);
    r.get("steps", c.steps);
    r.get("init_std", c.init_std);
    r.get("seed", c.seed);
    r.get("record_every", c.record_every);
    if (r.has("clamp")) {
        std::vector<std::string> names;
        r.get("clamp", names);
        c.clamp_a = c.clamp_b = c.clamp_c = false;
        for (const auto& n : names) {
            if (n == "a") c.clamp_a = true;
            else if (n == "b") c.clamp_b = true;
            else if (n == "c") c.clamp_c = true;
            else throw ConfigError(where + ".clamp: unknown vector '" + n + "'");
        }
    }
    if (r.has("truth")) {
        Reader t(r.raw("truth"), where + ".truth");
        t.get("a", c.truth.a);
        t.get("b", c.truth.b);
        t.get("c", c.truth.c);
        t.done();
    }
    r.done();
}

void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    Json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
        if (!node->is_object()) throw ConfigError("override '" + key + "': '" + part + "' is not inside an object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        auto it = node->find(part);
        if (it == node->end()) throw ConfigError("override '" + key + "': no section '" + part + "'");
        node = &*it;
        start = dot + 1;
    }
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace optolab
