#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dcla/matrix.hpp"

namespace dcla {

enum class SimilarityScope { LastToken, SequenceFlattened };

const char* to_string(SimilarityScope scope);
SimilarityScope parse_scope(const std::string& text);

// What a hook reports for one layer of one decode step.
struct CorrectionRecord {
    int step = 0;
    int layer = 0;
    // Similarity of the last position (last-token scope) or of the whole
    // flattened sequence.
    float similarity = 1.0f;
    bool triggered = false;
    SimilarityScope scope = SimilarityScope::LastToken;
    // Absolute sequence positions whose state was replaced at this layer.
    std::vector<int> corrected_positions;
};

struct StepInfo {
    int step = 0;
    int n_layers = 0;
    // Absolute sequence position of row 0 of this step's hidden states.
    int first_position = 0;
};

// Per-layer intervention point. A decode session calls begin_step once per
// forward pass with the embedding output (layer 0), then on_layer for layers
// 1..N in order. The returned matrix is the effective state: it feeds the
// next layer and the decoding head, and must keep the input's shape.
class LayerHook {
public:
    virtual ~LayerHook() = default;

    virtual std::string name() const = 0;
    virtual void begin_step(const StepInfo& info, const Matrix& embedded) {
        (void)info;
        (void)embedded;
    }
    virtual Matrix on_layer(int layer, Matrix hidden) = 0;
    // Report for the most recent on_layer call, if the hook computes one.
    virtual std::optional<CorrectionRecord> take_record() { return std::nullopt; }
};

class IdentityHook final : public LayerHook {
public:
    std::string name() const override { return "identity"; }
    Matrix on_layer(int, Matrix hidden) override { return hidden; }
};

} // namespace dcla
