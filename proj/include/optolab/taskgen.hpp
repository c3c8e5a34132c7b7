#pragma once

// Few-shot episodes: two exemplar-label pairs followed by a query exemplar,
// with labels reassigned per sequence. Held-out classes test the match step,
// held-out label pairs test the copy step.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "optolab/rng.hpp"
#include "optolab/tensor.hpp"

namespace optolab {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct WorldConfig {
    std::size_t train_classes = 50;
    std::size_t test_classes = 100;
    std::size_t exemplars_per_class = 1;
    std::size_t labels = 5;
    double train_pair_fraction = 0.8;
    std::size_t exemplar_dim = 512;
    std::uint64_t seed = 0;

    /// Throws ConfigError listing every violated constraint.
    void validate() const;
    std::size_t label_pair_count() const { return labels * (labels - 1) / 2; }
    std::size_t train_pair_count() const;
};

struct LabelPair {
    std::uint32_t lo = 0, hi = 0;
    friend bool operator==(const LabelPair&, const LabelPair&) = default;
    friend auto operator<=>(const LabelPair&, const LabelPair&) = default;
};

/// One fixed unit vector per class. Train classes are ids [0, C), test classes [C, C + C_test).
class ClassEmbeddingStore {
public:
    ClassEmbeddingStore() = default;
    ClassEmbeddingStore(std::size_t count, std::size_t dim, std::vector<double> data);

    std::size_t count() const { return count_; }
    std::size_t dim() const { return dim_; }
    std::span<const double> row(std::size_t cls) const {
        return {data_.data() + cls * dim_, dim_};
    }
    const std::vector<double>& data() const { return data_; }

    friend bool operator==(const ClassEmbeddingStore&, const ClassEmbeddingStore&) = default;

private:
    std::size_t count_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

struct World {
    WorldConfig config;
    ClassEmbeddingStore store;
    std::vector<LabelPair> train_pairs;
    std::vector<LabelPair> heldout_pairs;
};

struct SequenceSpec {
    std::uint32_t class_a = 0, class_b = 0;
    std::uint32_t label_a = 0, label_b = 0;
    bool a_first = true;  // context order
    bool query_a = true;  // which class is queried

    std::uint32_t query_class() const { return query_a ? class_a : class_b; }
    std::uint32_t target() const { return query_a ? label_a : label_b; }
    friend bool operator==(const SequenceSpec&, const SequenceSpec&) = default;
    friend auto operator<=>(const SequenceSpec&, const SequenceSpec&) = default;
};

enum class TokenKind : std::uint8_t { Exemplar, Label };

struct Token {
    TokenKind kind = TokenKind::Exemplar;
    std::uint32_t id = 0;  // exemplar: row of SequenceBatch::exemplar_table; label: label id
};

enum class Split { Train, TestExemplars, TestRelabel };
const char* split_name(Split split);
Split parse_split(const std::string& name);

/// Tokenized episodes, T tokens each: x, l, x, l, x_query.
struct SequenceBatch {
    std::size_t seq_len = 5;
    std::vector<Token> tokens;              // size() * seq_len
    Tensor exemplar_table;                  // [U, D] unique exemplar vectors used by this batch
    std::vector<std::uint32_t> table_classes;
    std::vector<std::uint32_t> targets;
    std::vector<std::uint32_t> correct_pos;
    std::vector<std::uint32_t> incorrect_pos;
    std::vector<SequenceSpec> specs;

    std::size_t size() const { return targets.size(); }
};

constexpr std::size_t kEpisodeLength = 5;

World build_world(const WorldConfig& config);
/// Uses the given store instead of drawing Gaussian vectors.
World build_world(const WorldConfig& config, ClassEmbeddingStore store);

/// 2 F E^3 C (C-1) L (L-1); throws std::overflow_error instead of wrapping.
std::uint64_t train_sequence_count(const WorldConfig& config);
/// Every distinct training SequenceSpec, each exactly once, in index order.
std::vector<SequenceSpec> enumerate_train(const World& world);
/// The i-th training spec in enumeration order.
SequenceSpec decode_train_index(const World& world, std::uint64_t index);

SequenceSpec sample_spec(const World& world, Split split, CounterRng& rng);
SequenceBatch make_batch(const World& world, const std::vector<SequenceSpec>& specs);
SequenceBatch sample_batch(const World& world, Split split, std::size_t batch_size,
                           CounterRng& rng);

/// A fixed, seed-determined evaluation set stored as batches of at most `chunk` sequences.
struct EvalSet {
    Split split = Split::Train;
    std::vector<SequenceBatch> chunks;
    std::size_t size() const;
};
EvalSet make_eval_set(const World& world, Split split, std::size_t n, std::uint64_t seed, std::size_t chunk = 256);

/// Text format: header `classes=<n> dim=<d>` then one whitespace-separated vector per line.
void save_embeddings(const ClassEmbeddingStore& store, const std::filesystem::path& path);
/// Vectors are renormalized to unit norm. expected_dim = 0 skips the dimension check.
ClassEmbeddingStore load_embeddings(const std::filesystem::path& path, std::size_t expected_dim = 0);

}  // namespace optolab
