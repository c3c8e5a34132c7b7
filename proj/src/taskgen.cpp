#include "optolab/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace optolab {

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const char* what) {
    std::uint64_t r = 0;
    if (__builtin_mul_overflow(a, b, &r))
        throw std::overflow_error(std::string("sequence count overflows 64 bits at ") + what);
    return r;
}

std::vector<LabelPair> all_pairs(std::size_t labels) {
    std::vector<LabelPair> pairs;
    for (std::uint32_t i = 0; i < labels; ++i)
        for (std::uint32_t j = i + 1; j < labels; ++j) pairs.push_back({i, j});
    return pairs;
}

void normalize(std::span<double> v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double n = std::sqrt(ss);
    if (!(n > 0.0) || !std::isfinite(n)) throw std::runtime_error("cannot normalize a zero or non-finite vector");
    // Already-unit vectors are left untouched so save/load round trips are exact.
    if (std::abs(n - 1.0) <= 4.0 * std::numeric_limits<double>::epsilon()) return;
    for (double& x : v) x /= n;
}

// (a, b) with a < b from the index of an unordered pair among n items, row-major.
std::pair<std::uint32_t, std::uint32_t> decode_pair(std::uint64_t idx, std::uint64_t n) {
    std::uint32_t a = 0;
    while (idx >= n - 1 - a) {
        idx -= n - 1 - a;
        ++a;
    }
    return {a, static_cast<std::uint32_t>(a + 1 + idx)};
}

SequenceSpec spec_from_bits(std::uint32_t ca, std::uint32_t cb, LabelPair lp, unsigned bits) {
    SequenceSpec s;
    s.class_a = ca;
    s.class_b = cb;
    const bool swap_labels = bits & 1u;
    s.label_a = swap_labels ? lp.hi : lp.lo;
    s.label_b = swap_labels ? lp.lo : lp.hi;
    s.a_first = !(bits & 2u);
    s.query_a = !(bits & 4u);
    return s;
}

}  // namespace

std::size_t WorldConfig::train_pair_count() const {
    return static_cast<std::size_t>(std::llround(train_pair_fraction * static_cast<double>(label_pair_count())));
}

void WorldConfig::validate() const {
    std::vector<std::string> problems;
    if (train_classes < 2) problems.push_back("train_classes must be >= 2");
    if (labels < 2) problems.push_back("labels must be >= 2");
    if (exemplars_per_class < 1) problems.push_back("exemplars_per_class must be >= 1");
    if (exemplar_dim == 0) problems.push_back("exemplar_dim must be positive");
    if (test_classes == 1) problems.push_back("test_classes must be 0 or >= 2");
    if (!(train_pair_fraction > 0.0 && train_pair_fraction <= 1.0)) {
        problems.push_back("train_pair_fraction must be in (0, 1]");
    } else if (labels >= 2) {
        const double want = train_pair_fraction * static_cast<double>(label_pair_count());
        if (std::abs(want - std::round(want)) > 1e-9)
            problems.push_back("train_pair_fraction * C(labels, 2) = " + std::to_string(want) +
                               " is not an integer");
        else if (std::llround(want) < 1)
            problems.push_back("no train label pairs");
    }
    if (problems.empty()) return;
    std::string msg = "invalid world config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

const char* split_name(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::TestExemplars: return "test_exemplars";
        case Split::TestRelabel: return "test_relabel";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "test_exemplars") return Split::TestExemplars;
    if (name == "test_relabel") return Split::TestRelabel;
    throw ConfigError("unknown split '" + name + "'");
}

ClassEmbeddingStore::ClassEmbeddingStore(std::size_t count, std::size_t dim, std::vector<double> data)
    : count_(count), dim_(dim), data_(std::move(data)) {
    if (data_.size() != count * dim)
        throw std::runtime_error("embedding store: expected " + std::to_string(count * dim) +
                                 " values, got " + std::to_string(data_.size()));
}

World build_world(const WorldConfig& config) {
    config.validate();
    const std::size_t n = config.train_classes + config.test_classes;
    const std::size_t d = config.exemplar_dim;
    CounterRng rng = CounterRng(config.seed).split(1);
    std::vector<double> data(n * d);
    for (auto& x : data) x = rng.normal();
    for (std::size_t c = 0; c < n; ++c) normalize({data.data() + c * d, d});
    return build_world(config, ClassEmbeddingStore(n, d, std::move(data)));
}

World build_world(const WorldConfig& config, ClassEmbeddingStore store) {
    config.validate();
    if (config.exemplars_per_class != 1) throw ConfigError("the generator supports exemplars_per_class = 1 only");
    if (store.dim() != config.exemplar_dim)
        throw ConfigError("embedding dimension " + std::to_string(store.dim()) +
                          " does not match exemplar_dim " + std::to_string(config.exemplar_dim));
    if (store.count() < config.train_classes + config.test_classes)
        throw ConfigError("embedding store holds " + std::to_string(store.count()) + " classes, need " +
                          std::to_string(config.train_classes + config.test_classes));

    World w;
    w.config = config;
    w.store = std::move(store);

    auto pairs = all_pairs(config.labels);
    CounterRng rng = CounterRng(config.seed).split(2);
    for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[rng.below(i)]);
    const std::size_t n_held = pairs.size() - config.train_pair_count();
    w.heldout_pairs.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n_held));
    w.train_pairs.assign(pairs.begin() + static_cast<std::ptrdiff_t>(n_held), pairs.end());
    std::sort(w.heldout_pairs.begin(), w.heldout_pairs.end());
    std::sort(w.train_pairs.begin(), w.train_pairs.end());
    return w;
}

std::uint64_t train_sequence_count(const WorldConfig& config) {
    config.validate();
    // 2 F E^3 C (C-1) L (L-1) = 8 * E^3 * C(C,2) * (F * C(L,2))
    const std::uint64_t c = config.train_classes;
    const std::uint64_t e = config.exemplars_per_class;
    std::uint64_t n = checked_mul(c, c - 1, "C(C-1)") / 2;
    n = checked_mul(n, config.train_pair_count(), "label pairs");
    n = checked_mul(n, checked_mul(checked_mul(e, e, "E^2"), e, "E^3"), "exemplars");
    return checked_mul(n, 8, "order bits");
}

SequenceSpec decode_train_index(const World& world, std::uint64_t index) {
    const std::uint64_t n_pairs = world.train_pairs.size();
    const std::uint64_t total = train_sequence_count(world.config);
    if (index >= total) throw std::out_of_range("train index " + std::to_string(index) + " >= " + std::to_string(total));
    const unsigned bits = static_cast<unsigned>(index % 8);
    index /= 8;
    const LabelPair lp = world.train_pairs[index % n_pairs];
    index /= n_pairs;
    const auto [a, b] = decode_pair(index, world.config.train_classes);
    return spec_from_bits(a, b, lp, bits);
}

std::vector<SequenceSpec> enumerate_train(const World& world) {
    const std::uint64_t total = train_sequence_count(world.config);
    std::vector<SequenceSpec> out;
    out.reserve(total);
    for (std::uint64_t i = 0; i < total; ++i) out.push_back(decode_train_index(world, i));
    return out;
}

SequenceSpec sample_spec(const World& world, Split split, CounterRng& rng) {
    const auto& cfg = world.config;
    switch (split) {
        case Split::Train:
            return decode_train_index(world, rng.below(train_sequence_count(cfg)));
        case Split::TestExemplars: {
            if (cfg.test_classes < 2) throw ConfigError("test_exemplars split is empty: fewer than 2 test classes");
            const std::uint64_t n = cfg.test_classes;
            const auto [a, b] = decode_pair(rng.below(n * (n - 1) / 2), n);
            const auto pairs = all_pairs(cfg.labels);
            const LabelPair lp = pairs[rng.below(pairs.size())];
            const auto off = static_cast<std::uint32_t>(cfg.train_classes);
            return spec_from_bits(a + off, b + off, lp, static_cast<unsigned>(rng.below(8)));
        }
        case Split::TestRelabel: {
            if (world.heldout_pairs.empty()) throw ConfigError("test_relabel split is empty: no held-out label pairs");
            const std::uint64_t n = cfg.train_classes;
            const auto [a, b] = decode_pair(rng.below(n * (n - 1) / 2), n);
            const LabelPair lp = world.heldout_pairs[rng.below(world.heldout_pairs.size())];
            return spec_from_bits(a, b, lp, static_cast<unsigned>(rng.below(8)));
        }
    }
    throw std::logic_error("bad split");
}

SequenceBatch make_batch(const World& world, const std::vector<SequenceSpec>& specs) {
    SequenceBatch batch;
    batch.seq_len = kEpisodeLength;
    batch.specs = specs;
    std::map<std::uint32_t, std::uint32_t> row_of;
    auto row = [&](std::uint32_t cls) {
        if (cls >= world.store.count()) throw std::out_of_range("class id " + std::to_string(cls) + " out of range");
        auto [it, inserted] = row_of.emplace(cls, static_cast<std::uint32_t>(batch.table_classes.size()));
        if (inserted) batch.table_classes.push_back(cls);
        return it->second;
    };
    batch.tokens.reserve(specs.size() * kEpisodeLength);
    for (const auto& s : specs) {
        if (s.class_a == s.class_b || s.label_a == s.label_b)
            throw std::invalid_argument("sequence spec needs distinct classes and labels");
        const std::uint32_t c1 = s.a_first ? s.class_a : s.class_b;
        const std::uint32_t l1 = s.a_first ? s.label_a : s.label_b;
        const std::uint32_t c2 = s.a_first ? s.class_b : s.class_a;
        const std::uint32_t l2 = s.a_first ? s.label_b : s.label_a;
        batch.tokens.push_back({TokenKind::Exemplar, row(c1)});
        batch.tokens.push_back({TokenKind::Label, l1});
        batch.tokens.push_back({TokenKind::Exemplar, row(c2)});
        batch.tokens.push_back({TokenKind::Label, l2});
        batch.tokens.push_back({TokenKind::Exemplar, row(s.query_class())});
        batch.targets.push_back(s.target());
        const bool first = (s.query_a == s.a_first);
        batch.correct_pos.push_back(first ? 1 : 3);
        batch.incorrect_pos.push_back(first ? 3 : 1);
    }
    const std::size_t d = world.store.dim();
    std::vector<double> table(batch.table_classes.size() * d);
    for (std::size_t i = 0; i < batch.table_classes.size(); ++i) {
        auto r = world.store.row(batch.table_classes[i]);
        std::copy(r.begin(), r.end(), table.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    batch.exemplar_table = Tensor({batch.table_classes.size(), d}, std::move(table));
    return batch;
}

SequenceBatch sample_batch(const World& world, Split split, std::size_t batch_size, CounterRng& rng) {
    std::vector<SequenceSpec> specs;
    specs.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) specs.push_back(sample_spec(world, split, rng));
    return make_batch(world, specs);
}

std::size_t EvalSet::size() const {
    std::size_t n = 0;
    for (const auto& c : chunks) n += c.size();
    return n;
}

EvalSet make_eval_set(const World& world, Split split, std::size_t n, std::uint64_t seed, std::size_t chunk) {
    if (chunk == 0) throw std::invalid_argument("eval chunk size must be positive");
    EvalSet set;
    set.split = split;
    CounterRng rng = CounterRng(seed).split(100 + static_cast<std::uint64_t>(split));
    for (std::size_t done = 0; done < n; done += chunk)
        set.chunks.push_back(sample_batch(world, split, std::min(chunk, n - done), rng));
    return set;
}

void save_embeddings(const ClassEmbeddingStore& store, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "classes=" << store.count() << " dim=" << store.dim() << "\n";
    out << std::setprecision(17);
    for (std::size_t c = 0; c < store.count(); ++c) {
        auto r = store.row(c);
        for (std::size_t j = 0; j < r.size(); ++j) out << (j ? " " : "") << r[j];
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

ClassEmbeddingStore load_embeddings(const std::filesystem::path& path, std::size_t expected_dim) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(in, header);
    std::size_t n = 0, d = 0;
    {
        std::istringstream hs(header);
        std::string a, b, extra;
        if (!(hs >> a >> b) || (hs >> extra) || a.rfind("classes=", 0) != 0 || b.rfind("dim=", 0) != 0)
            throw std::runtime_error(path.string() + ": malformed header '" + header + "'");
        try {
            std::size_t used = 0;
            n = std::stoul(a.substr(8), &used);
            if (used != a.size() - 8) throw std::invalid_argument("junk");
            d = std::stoul(b.substr(4), &used);
            if (used != b.size() - 4) throw std::invalid_argument("junk");
        } catch (const std::logic_error&) {
            throw std::runtime_error(path.string() + ": malformed header '" + header + "'");
        }
        if (n == 0 || d == 0) throw std::runtime_error(path.string() + ": header declares an empty store");
    }
    if (expected_dim != 0 && d != expected_dim)
        throw ConfigError(path.string() + ": dimension " + std::to_string(d) + " does not match exemplar_dim " +
                          std::to_string(expected_dim));
    std::vector<double> data;
    data.reserve(n * d);
    std::string line;
    for (std::size_t c = 0; c < n; ++c) {
        if (!std::getline(in, line))
            throw std::runtime_error(path.string() + ": expected " + std::to_string(n) + " vectors, found " +
                                     std::to_string(c));
        std::istringstream ls(line);
        std::size_t got = 0;
        std::string tok;
        while (ls >> tok) {
            try {
                std::size_t used = 0;
                data.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument("junk");
            } catch (const std::logic_error&) {
                throw std::runtime_error(path.string() + ": bad number '" + tok + "' on vector " + std::to_string(c));
            }
            ++got;
        }
        if (got != d)
            throw std::runtime_error(path.string() + ": vector " + std::to_string(c) + " has " + std::to_string(got) +
                                     " values, expected " + std::to_string(d));
        normalize({data.data() + c * d, d});
    }
    return ClassEmbeddingStore(n, d, std::move(data));
}

}  // namespace optolab
