#include "onetrans/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace onetrans {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Behavior types
// ---------------------------------------------------------------------------

const char* behavior_type_name(BehaviorType t) {
    switch (t) {
        case BehaviorType::impression: return "impression";
        case BehaviorType::click: return "click";
        case BehaviorType::add_to_cart: return "add_to_cart";
        case BehaviorType::purchase: return "purchase";
    }
    return "unknown";
}

std::optional<BehaviorType> behavior_type_from(std::string_view name) {
    if (name == "impression") return BehaviorType::impression;
    if (name == "click") return BehaviorType::click;
    if (name == "add_to_cart") return BehaviorType::add_to_cart;
    if (name == "purchase") return BehaviorType::purchase;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

uint64_t fnv1a64(std::string_view bytes, uint64_t seed) {
    uint64_t h = 14695981039346656037ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string feature_key(const std::string& name, const FeatureValue& v) {
    std::string out = name;
    out += ':';
    if (const auto* s = std::get_if<std::string>(&v)) {
        out += *s;
    } else if (const auto* i = std::get_if<int64_t>(&v)) {
        out += std::to_string(*i);
    } else {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", std::get<double>(v));
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

ordered_json feature_map_to_json(const FeatureMap& m) {
    ordered_json j = ordered_json::object();
    for (const auto& [k, v] : m) {
        if (const auto* s = std::get_if<std::string>(&v))
            j[k] = *s;
        else if (const auto* i = std::get_if<int64_t>(&v))
            j[k] = *i;
        else
            j[k] = std::get<double>(v);
    }
    return j;
}

ordered_json sequence_to_json(const BehaviorSequence& s) {
    ordered_json js = ordered_json::object();
    js["type"] = behavior_type_name(s.type);
    ordered_json evs = ordered_json::array();
    for (const Event& e : s.events) {
        ordered_json je = ordered_json::object();
        je["item"] = e.item;
        je["cat"] = e.cat;
        je["price_bucket"] = e.price_bucket;
        je["ts"] = e.ts;
        evs.push_back(std::move(je));
    }
    js["events"] = std::move(evs);
    return js;
}

[[noreturn]] void schema_error(const std::string& msg) { throw std::runtime_error("schema: " + msg); }

void check_known_keys(const json& obj, std::initializer_list<const char*> known, const char* where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : known)
            if (it.key() == k) { ok = true; break; }
        if (!ok) schema_error(std::string("unknown key '") + it.key() + "' in " + where);
    }
}

FeatureValue feature_value_from_json(const std::string& name, const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return v.get<int64_t>();
    if (v.is_number_float()) return v.get<double>();
    schema_error("feature '" + name + "' has unsupported value type");
}

FeatureMap feature_map_from_json(const json& j, const char* where) {
    if (!j.is_object()) schema_error(std::string(where) + " must be an object");
    FeatureMap m;
    for (auto it = j.begin(); it != j.end(); ++it) m.emplace(it.key(), feature_value_from_json(it.key(), it.value()));
    return m;
}

BehaviorSequence sequence_from_json(const json& js) {
    if (!js.is_object()) schema_error("sequence must be an object");
    check_known_keys(js, {"type", "events"}, "sequence");
    if (!js.contains("type") || !js["type"].is_string()) schema_error("sequence missing string 'type'");
    auto t = behavior_type_from(js["type"].get<std::string>());
    if (!t) schema_error("unknown behavior type '" + js["type"].get<std::string>() + "'");
    if (!js.contains("events") || !js["events"].is_array()) schema_error("sequence missing array 'events'");
    BehaviorSequence seq;
    seq.type = *t;
    for (const json& je : js["events"]) {
        if (!je.is_object()) schema_error("event must be an object");
        check_known_keys(je, {"item", "cat", "price_bucket", "ts"}, "event");
        Event e;
        if (!je.contains("item") || !je["item"].is_string()) schema_error("event missing string 'item'");
        if (!je.contains("cat") || !je["cat"].is_string()) schema_error("event missing string 'cat'");
        if (!je.contains("price_bucket") || !je["price_bucket"].is_number_integer())
            schema_error("event missing integer 'price_bucket'");
        if (!je.contains("ts") || !je["ts"].is_number_integer()) schema_error("event missing integer 'ts'");
        e.item = je["item"].get<std::string>();
        e.cat = je["cat"].get<std::string>();
        e.price_bucket = je["price_bucket"].get<int>();
        e.ts = je["ts"].get<int64_t>();
        if (e.ts < 0) schema_error("event ts must be >= 0");
        seq.events.push_back(std::move(e));
    }
    if (!seq.sorted_by_ts()) schema_error("sequence events not sorted by ts");
    return seq;
}

Request request_from_json(const json& j) {
    if (!j.is_object()) schema_error("request must be an object");
    check_known_keys(j, {"request_id", "user_id", "ts", "user", "context", "sequences", "candidates"}, "request");
    for (const char* k : {"request_id", "user_id", "ts", "user", "context", "sequences", "candidates"})
        if (!j.contains(k)) schema_error(std::string("request missing '") + k + "'");
    Request r;
    if (!j["request_id"].is_string()) schema_error("'request_id' must be a string");
    if (!j["user_id"].is_string()) schema_error("'user_id' must be a string");
    if (!j["ts"].is_number_integer()) schema_error("'ts' must be an integer");
    r.request_id = j["request_id"].get<std::string>();
    r.user_id = j["user_id"].get<std::string>();
    r.ts = j["ts"].get<int64_t>();
    r.user = feature_map_from_json(j["user"], "user");
    r.context = feature_map_from_json(j["context"], "context");
    if (!j["sequences"].is_array()) schema_error("'sequences' must be an array");
    for (const json& js : j["sequences"]) r.sequences.push_back(sequence_from_json(js));
    if (!j["candidates"].is_array() || j["candidates"].empty()) schema_error("'candidates' must be a non-empty array");
    for (const json& jc : j["candidates"]) {
        if (!jc.is_object()) schema_error("candidate must be an object");
        check_known_keys(jc, {"features", "sim_seq", "click", "conv"}, "candidate");
        CandidateRecord c;
        if (!jc.contains("features")) schema_error("candidate missing 'features'");
        c.features = feature_map_from_json(jc["features"], "candidate features");
        if (jc.contains("sim_seq") && !jc["sim_seq"].is_null()) c.sim_seq = sequence_from_json(jc["sim_seq"]);
        if (!jc.contains("click") || !jc["click"].is_number_integer()) schema_error("candidate missing integer 'click'");
        if (!jc.contains("conv") || !jc["conv"].is_number_integer()) schema_error("candidate missing integer 'conv'");
        c.click = jc["click"].get<int>();
        c.conv = jc["conv"].get<int>();
        if (c.click != 0 && c.click != 1) schema_error("'click' must be 0 or 1");
        if (c.conv != 0 && c.conv != 1) schema_error("'conv' must be 0 or 1");
        if (c.conv == 1 && c.click == 0) schema_error("conversion without click");
        r.candidates.push_back(std::move(c));
    }
    return r;
}

}  // namespace

std::string request_to_jsonl(const Request& r) {
    ordered_json j = ordered_json::object();
    j["request_id"] = r.request_id;
    j["user_id"] = r.user_id;
    j["ts"] = r.ts;
    j["user"] = feature_map_to_json(r.user);
    j["context"] = feature_map_to_json(r.context);
    ordered_json seqs = ordered_json::array();
    for (const auto& s : r.sequences) seqs.push_back(sequence_to_json(s));
    j["sequences"] = std::move(seqs);
    ordered_json cands = ordered_json::array();
    for (const auto& c : r.candidates) {
        ordered_json jc = ordered_json::object();
        jc["features"] = feature_map_to_json(c.features);
        if (c.sim_seq) jc["sim_seq"] = sequence_to_json(*c.sim_seq);
        jc["click"] = c.click;
        jc["conv"] = c.conv;
        cands.push_back(std::move(jc));
    }
    j["candidates"] = std::move(cands);
    return j.dump();
}

void write_jsonl(const std::vector<Request>& requests, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
    for (const Request& r : requests) out << request_to_jsonl(r) << '\n';
}

// ---------------------------------------------------------------------------
// JsonlReader
// ---------------------------------------------------------------------------

struct JsonlReader::Impl {
    std::ifstream in;
    int line_no = 0;
};

JsonlReader::JsonlReader(const std::string& path, LoadOptions opts) : impl_(new Impl), opts_(opts) {
    impl_->in.open(path);
    if (!impl_->in) throw std::runtime_error("load_jsonl: cannot open " + path);
}

JsonlReader::~JsonlReader() = default;

std::optional<Request> JsonlReader::next() {
    std::string line;
    while (std::getline(impl_->in, line)) {
        ++impl_->line_no;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            return request_from_json(j);
        } catch (const std::exception& e) {
            LineError err{impl_->line_no, e.what()};
            if (opts_.fail_fast)
                throw std::runtime_error("load_jsonl: line " + std::to_string(err.line) + ": " + err.message);
            ++skipped_;
            errors_.push_back(std::move(err));
        }
    }
    return std::nullopt;
}

std::vector<Request> load_jsonl(const std::string& path, LoadOptions opts) {
    JsonlReader reader(path, opts);
    std::vector<Request> out;
    while (auto r = reader.next()) out.push_back(std::move(*r));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
    if (users < 1) throw std::invalid_argument("synth: users must be >= 1");
    if (items < 1) throw std::invalid_argument("synth: items must be >= 1");
    if (categories < 1 || categories > items) throw std::invalid_argument("synth: categories must be in [1, items]");
    if (price_buckets < 1) throw std::invalid_argument("synth: price_buckets must be >= 1");
    if (days < 1) throw std::invalid_argument("synth: days must be >= 1");
    if (requests_per_user_per_day < 1) throw std::invalid_argument("synth: requests_per_user_per_day must be >= 1");
    if (candidates_per_request < 1) throw std::invalid_argument("synth: candidates_per_request must be >= 1");
    if (init_clicks < 0 || init_purchases < 0 || events_per_request < 0)
        throw std::invalid_argument("synth: event counts must be >= 0");
    if (purchase_rate < 0 || purchase_rate > 1 || pref_category_rate < 0 || pref_category_rate > 1 ||
        click_pref_rate < 0 || click_pref_rate > 1 || matched_candidate_rate < 0 || matched_candidate_rate > 1)
        throw std::invalid_argument("synth: rates must be in [0,1]");
    if (noise_sigma < 0) throw std::invalid_argument("synth: noise_sigma must be >= 0");
    if (sim_max_events < 1) throw std::invalid_argument("synth: sim_max_events must be >= 1");
}

namespace {

constexpr int64_t kEpoch0 = 1'600'000'000'000;  // generation starts here; history sits before it

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct UserState {
    int preferred_cat = 0;
    std::vector<Event> clicks;
    std::vector<Event> purchases;
    std::vector<int> purchase_cat_counts;
    int64_t last_event_ts = 0;

    // Most frequent purchased category; -1 when no purchases yet. Ties go to
    // the smallest category index.
    int purchase_mode() const {
        int best = -1, best_count = 0;
        for (size_t c = 0; c < purchase_cat_counts.size(); ++c) {
            if (purchase_cat_counts[c] > best_count) {
                best_count = purchase_cat_counts[c];
                best = static_cast<int>(c);
            }
        }
        return best;
    }
};

struct RequestSlot {
    int64_t ts;
    int user;
    int seq;  // per-day emission index, tie-break
};

}  // namespace

struct SyntheticStream::Impl {
    SynthConfig cfg;
    std::mt19937_64 rng;
    std::vector<UserState> users;
    int day = -1;
    std::vector<RequestSlot> slots;
    size_t slot_idx = 0;
    int64_t emitted = 0;

    explicit Impl(SynthConfig c, uint64_t seed) : cfg(std::move(c)), rng(seed) {
        cfg.validate();
        init_users();
    }

    int cat_of_item(int item) const { return item % cfg.categories; }
    int price_of_item(int item) const { return (item * 7 + 3) % cfg.price_buckets; }

    std::string item_name(int item) const { return "item_" + std::to_string(item); }
    std::string cat_name(int cat) const { return "cat_" + std::to_string(cat); }

    int random_item() { return static_cast<int>(rng() % static_cast<uint64_t>(cfg.items)); }

    // Uniform item within a category; category indices < items so at least one exists.
    int random_item_in_cat(int cat) {
        const int n = (cfg.items - 1 - cat) / cfg.categories + 1;
        const int k = static_cast<int>(rng() % static_cast<uint64_t>(n));
        return cat + k * cfg.categories;
    }

    double uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
    double normal01() { return std::normal_distribution<double>(0.0, 1.0)(rng); }

    Event make_event(int item, int64_t ts) {
        Event e;
        e.item = item_name(item);
        e.cat = cat_name(cat_of_item(item));
        e.price_bucket = price_of_item(item);
        e.ts = ts;
        return e;
    }

    int draw_event_item(UserState& u, bool is_purchase) {
        const double pref_rate = is_purchase ? cfg.pref_category_rate : cfg.click_pref_rate;
        const int cat = (uniform01() < pref_rate) ? u.preferred_cat
                                                  : static_cast<int>(rng() % static_cast<uint64_t>(cfg.categories));
        return random_item_in_cat(cat);
    }

    void record_event(UserState& u, bool is_purchase, Event e) {
        if (is_purchase) {
            u.purchase_cat_counts[cat_of_item_name(e.cat)] += 1;
            u.purchases.push_back(std::move(e));
        } else {
            u.clicks.push_back(std::move(e));
        }
    }

    static int cat_of_item_name(const std::string& cat) {
        return std::stoi(cat.substr(4));  // "cat_<i>"
    }

    void init_users() {
        const int64_t window = 30 * kMillisPerDay;
        const int64_t start = kEpoch0 - window;
        users.resize(cfg.users);
        for (int ui = 0; ui < cfg.users; ++ui) {
            UserState& u = users[ui];
            u.preferred_cat = static_cast<int>(rng() % static_cast<uint64_t>(cfg.categories));
            u.purchase_cat_counts.assign(cfg.categories, 0);
            // Purchases first (oldest); deep-signal mode pins them to the oldest
            // 30% of the window so short token budgets cannot see them.
            std::vector<int64_t> pts(cfg.init_purchases), cts(cfg.init_clicks);
            const int64_t psplit = cfg.deep_signal ? start + window * 3 / 10 : kEpoch0;
            const int64_t cstart = cfg.deep_signal ? start + window * 35 / 100 : start;
            for (auto& t : pts) t = start + static_cast<int64_t>(rng() % static_cast<uint64_t>(psplit - start));
            for (auto& t : cts) t = cstart + static_cast<int64_t>(rng() % static_cast<uint64_t>(kEpoch0 - cstart));
            std::sort(pts.begin(), pts.end());
            std::sort(cts.begin(), cts.end());
            for (int64_t t : pts) {
                const int item = draw_event_item(u, true);
                record_event(u, true, make_event(item, t));
            }
            for (int64_t t : cts) {
                const int item = draw_event_item(u, false);
                record_event(u, false, make_event(item, t));
            }
            u.last_event_ts = kEpoch0 - 1;
        }
    }

    void build_day(int d) {
        slots.clear();
        slot_idx = 0;
        int seq = 0;
        for (int ui = 0; ui < cfg.users; ++ui) {
            for (int r = 0; r < cfg.requests_per_user_per_day; ++r) {
                const int64_t ts =
                    kEpoch0 + d * kMillisPerDay + static_cast<int64_t>(rng() % static_cast<uint64_t>(kMillisPerDay));
                slots.push_back({ts, ui, seq++});
            }
        }
        std::sort(slots.begin(), slots.end(), [](const RequestSlot& a, const RequestSlot& b) {
            if (a.ts != b.ts) return a.ts < b.ts;
            return a.seq < b.seq;
        });
    }

    Request emit_request(const RequestSlot& slot) {
        UserState& u = users[slot.user];
        // New behavior between the user's previous request and this one.
        const int64_t lo = std::max(u.last_event_ts, slot.ts - kMillisPerDay) + 1;
        for (int k = 0; k < cfg.events_per_request; ++k) {
            const int64_t ts = lo + (slot.ts - 1 - lo) * (k + 1) / (cfg.events_per_request + 1);
            const bool is_purchase = !cfg.deep_signal && uniform01() < cfg.purchase_rate;
            const int item = draw_event_item(u, is_purchase);
            record_event(u, is_purchase, make_event(item, std::max(ts, lo)));
        }
        if (cfg.events_per_request > 0) u.last_event_ts = std::max(u.last_event_ts, slot.ts - 1);

        Request r;
        r.request_id = "r" + std::to_string(emitted);
        r.user_id = "user_" + std::to_string(slot.user);
        r.ts = slot.ts;
        r.user["user_id"] = r.user_id;
        r.user["activity"] = static_cast<int64_t>(slot.user % 8);
        r.context["hour"] = static_cast<int64_t>((slot.ts / 3'600'000) % 24);
        r.context["device"] = "dev_" + std::to_string((slot.user + day) % 3);
        if (!u.clicks.empty()) r.sequences.push_back({BehaviorType::click, u.clicks});
        if (!u.purchases.empty()) r.sequences.push_back({BehaviorType::purchase, u.purchases});

        const int mode = u.purchase_mode();
        for (int c = 0; c < cfg.candidates_per_request; ++c) {
            const bool want_match = mode >= 0 && uniform01() < cfg.matched_candidate_rate;
            const int item = want_match ? random_item_in_cat(mode) : random_item();
            const int cat = cat_of_item(item);
            const bool match = mode >= 0 && cat == mode;
            const double logit = cfg.bias + cfg.w * (match ? 1.0 : 0.0) +
                                 (cfg.noise_sigma > 0 ? cfg.noise_sigma * normal01() : 0.0);
            const int click = uniform01() < sigmoid(logit) ? 1 : 0;
            const int conv =
                click && uniform01() < sigmoid(cfg.conv_bias + cfg.conv_w * (match ? 1.0 : 0.0)) ? 1 : 0;

            CandidateRecord cand;
            cand.features["item"] = item_name(item);
            cand.features["cat"] = cat_name(cat);
            cand.features["price_bucket"] = static_cast<int64_t>(price_of_item(item));
            if (cfg.emit_sim_seq) {
                // retrieve the most recent clicks in the candidate category
                BehaviorSequence sim;
                sim.type = BehaviorType::click;
                const std::string& cname = std::get<std::string>(cand.features["cat"]);
                for (auto it = u.clicks.rbegin(); it != u.clicks.rend() && (int)sim.events.size() < cfg.sim_max_events;
                     ++it)
                    if (it->cat == cname) sim.events.push_back(*it);
                std::reverse(sim.events.begin(), sim.events.end());
                if (!sim.events.empty()) cand.sim_seq = std::move(sim);
            }
            cand.click = click;
            cand.conv = conv;
            r.candidates.push_back(std::move(cand));
        }
        ++emitted;
        return r;
    }
};

SyntheticStream::SyntheticStream(SynthConfig cfg, uint64_t seed) : impl_(new Impl(std::move(cfg), seed)) {}
SyntheticStream::~SyntheticStream() = default;

std::optional<Request> SyntheticStream::next() {
    while (true) {
        if (impl_->day >= impl_->cfg.days) return std::nullopt;
        if (impl_->day < 0 || impl_->slot_idx >= impl_->slots.size()) {
            ++impl_->day;
            if (impl_->day >= impl_->cfg.days) return std::nullopt;
            impl_->build_day(impl_->day);
            continue;
        }
        return impl_->emit_request(impl_->slots[impl_->slot_idx++]);
    }
}

std::vector<Request> generate_synthetic(const SynthConfig& cfg, uint64_t seed, int max_requests) {
    SyntheticStream stream(cfg, seed);
    std::vector<Request> out;
    while (auto r = stream.next()) {
        out.push_back(std::move(*r));
        if (max_requests >= 0 && static_cast<int>(out.size()) >= max_requests) break;
    }
    return out;
}

}  // namespace onetrans
