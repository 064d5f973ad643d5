#include "onetrans/numerics.hpp"

namespace onetrans::detail {

FlopCounter*& tl_meter() {
    thread_local FlopCounter* meter = nullptr;
    return meter;
}

FlopPhase& tl_phase() {
    thread_local FlopPhase phase = FlopPhase::other;
    return phase;
}

}  // namespace onetrans::detail
