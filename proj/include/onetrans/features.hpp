#pragma once

// Impression/request data model, hashed embedding tables, JSON-lines
// ingestion, and a synthetic log generator with a planted category-match
// signal.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "onetrans/numerics.hpp"

namespace onetrans {

// ---------------------------------------------------------------------------
// Data model
// ---------------------------------------------------------------------------

enum class BehaviorType : int { impression = 0, click = 1, add_to_cart = 2, purchase = 3 };
inline constexpr int kBehaviorTypeCount = 4;

const char* behavior_type_name(BehaviorType t);
std::optional<BehaviorType> behavior_type_from(std::string_view name);

// Higher rank means higher user intent: purchase > add_to_cart > click > impression.
inline int intent_rank(BehaviorType t) { return static_cast<int>(t); }

struct Event {
    std::string item;
    std::string cat;
    int price_bucket = 0;
    int64_t ts = 0;
};

struct BehaviorSequence {
    BehaviorType type = BehaviorType::click;
    std::vector<Event> events;  // ascending ts, ties keep input order

    bool sorted_by_ts() const {
        for (size_t i = 1; i < events.size(); ++i)
            if (events[i].ts < events[i - 1].ts) return false;
        return true;
    }
};

using FeatureValue = std::variant<std::string, int64_t, double>;
using FeatureMap = std::map<std::string, FeatureValue>;  // ordered keys, deterministic iteration

struct CandidateRecord {
    FeatureMap features;
    std::optional<BehaviorSequence> sim_seq;  // candidate-specific retrieved subsequence
    int click = 0;
    int conv = 0;
};

struct Request {
    std::string request_id;
    std::string user_id;
    int64_t ts = 0;
    FeatureMap user;
    FeatureMap context;
    std::vector<BehaviorSequence> sequences;
    std::vector<CandidateRecord> candidates;
};

inline constexpr int64_t kMillisPerDay = 86'400'000;
inline int64_t day_of_ts(int64_t ts) { return ts / kMillisPerDay; }

// ---------------------------------------------------------------------------
// Hashing and embedding tables
// ---------------------------------------------------------------------------

uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0);

// Canonical string key for a feature value: "<name>:<value>".
std::string feature_key(const std::string& name, const FeatureValue& v);

template <typename T>
struct EmbeddingTable {
    std::string name;
    int bucket_count = 0;
    int dim = 0;
    uint64_t hash_seed = 0;
    Matrix<T> rows;     // bucket_count x dim
    int grad_id = -1;   // slot assigned by the parameter registry

    EmbeddingTable() = default;
    EmbeddingTable(std::string n, int buckets, int d, uint64_t seed, std::mt19937_64& rng)
        : name(std::move(n)), bucket_count(buckets), dim(d), hash_seed(seed), rows(buckets, d) {
        if (buckets < 1 || d < 1) throw std::invalid_argument("EmbeddingTable: invalid shape");
        const T bound = T(1) / std::sqrt(static_cast<T>(d));
        std::uniform_real_distribution<double> u(-static_cast<double>(bound), static_cast<double>(bound));
        for (T& v : rows.data) v = static_cast<T>(u(rng));
    }

    int bucket_of(std::string_view key) const {
        return static_cast<int>(fnv1a64(key, hash_seed) % static_cast<uint64_t>(bucket_count));
    }

    std::span<const T> lookup(std::string_view key) const { return rows.row_span(bucket_of(key)); }
};

// ---------------------------------------------------------------------------
// Request sources
// ---------------------------------------------------------------------------

class RequestSource {
public:
    virtual ~RequestSource() = default;
    virtual std::optional<Request> next() = 0;
};

// ---------------------------------------------------------------------------
// JSON-lines ingestion / serialization
// ---------------------------------------------------------------------------

struct LoadOptions {
    bool fail_fast = true;  // false: skip bad lines and count them
};

struct LineError {
    int line = 0;
    std::string message;
};

std::string request_to_jsonl(const Request& r);
void write_jsonl(const std::vector<Request>& requests, const std::string& path);

class JsonlReader : public RequestSource {
public:
    JsonlReader(const std::string& path, LoadOptions opts = {});
    ~JsonlReader() override;
    std::optional<Request> next() override;

    int skipped() const { return skipped_; }
    const std::vector<LineError>& errors() const { return errors_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int skipped_ = 0;
    std::vector<LineError> errors_;
    LoadOptions opts_;
};

std::vector<Request> load_jsonl(const std::string& path, LoadOptions opts = {});

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

// Click probability for a candidate is sigmoid(bias + w * match + noise),
// where match says whether the candidate category equals the most frequent
// purchased category in the user history at request time. Conversions are
// sampled only on clicked impressions.
struct SynthConfig {
    int users = 200;
    int items = 500;
    int categories = 20;
    int price_buckets = 10;
    int days = 5;
    int requests_per_user_per_day = 4;
    int candidates_per_request = 2;
    int init_clicks = 24;
    int init_purchases = 6;
    int events_per_request = 1;    // new events appended before each request
    double purchase_rate = 0.15;   // fraction of new events that are purchases
    double pref_category_rate = 0.8;  // purchases hit the preferred category this often
    double click_pref_rate = 0.3;     // clicks are mildly informative
    double matched_candidate_rate = 0.5;
    double w = 4.0;
    double bias = -2.0;
    double noise_sigma = 0.5;
    double conv_bias = -1.5;
    double conv_w = 1.0;
    bool deep_signal = false;  // purchases only at the oldest end of the history
    bool emit_sim_seq = false;
    int sim_max_events = 8;

    void validate() const;
};

class SyntheticStream : public RequestSource {
public:
    SyntheticStream(SynthConfig cfg, uint64_t seed);
    ~SyntheticStream() override;
    std::optional<Request> next() override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::vector<Request> generate_synthetic(const SynthConfig& cfg, uint64_t seed, int max_requests = -1);

}  // namespace onetrans
