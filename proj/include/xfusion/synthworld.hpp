#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "xfusion/rng.hpp"

namespace xfusion {

// ---------------------------------------------------------------------------
// closed scene world: 3 shapes x 4 colors x 4 quadrants = 48 scenes
// ---------------------------------------------------------------------------

enum class ShapeKind { Square, Circle, Triangle };
enum class ColorKind { Red, Green, Blue, Yellow };
enum class QuadrantKind { TopLeft, TopRight, BottomLeft, BottomRight };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 4;
constexpr int kNumQuadrants = 4;
constexpr int kNumScenes = kNumShapes * kNumColors * kNumQuadrants;

struct SceneSpec {
    ShapeKind shape;
    ColorKind color;
    QuadrantKind quadrant;

    bool operator==(const SceneSpec&) const = default;
};

int scene_index(const SceneSpec& s);
SceneSpec scene_from_index(int idx);
std::vector<SceneSpec> all_scenes();

const char* shape_name(ShapeKind s);
const char* color_name(ColorKind c);
const char* quadrant_name(QuadrantKind q);
std::optional<ShapeKind> shape_from_name(const std::string& s);
std::optional<ColorKind> color_from_name(const std::string& s);
std::optional<QuadrantKind> quadrant_from_name(const std::string& s);

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

struct ImageLatent {
    static constexpr int kChannels = 3;
    static constexpr int kHeight = 16;
    static constexpr int kWidth = 16;
    static constexpr int kPixels = kChannels * kHeight * kWidth;

    std::array<float, kPixels> pix{};  // CHW, values in [-1, 1]

    float& at(int c, int y, int x) { return pix[(c * kHeight + y) * kWidth + x]; }
    float at(int c, int y, int x) const { return pix[(c * kHeight + y) * kWidth + x]; }
};

constexpr float kBackgroundLevel = -0.8f;

// deterministic renderer: the named shape in the named color, centered in the
// named quadrant, on a uniform background
ImageLatent render_scene(const SceneSpec& spec);

// 8x8 occupancy of a shape inside its quadrant cell
std::array<bool, 64> shape_mask(ShapeKind s);

// additive RGB for a color, in [-1,1] space
std::array<float, 3> color_rgb(ColorKind c);

void write_ppm(const std::string& path, const ImageLatent& img);

// ---------------------------------------------------------------------------
// patchify (reshape only; the learned projection lives in the model)
// ---------------------------------------------------------------------------

constexpr int kPatchSize = 2;
constexpr int kPatchDim = kPatchSize * kPatchSize * ImageLatent::kChannels;  // 12
constexpr int kNumPatches = (ImageLatent::kHeight / kPatchSize) * (ImageLatent::kWidth / kPatchSize);  // 64

// row-major patch order; vector layout (channel, dy, dx)
std::vector<float> patchify(const ImageLatent& img);
ImageLatent unpatchify(const std::vector<float>& patches);

// ---------------------------------------------------------------------------
// vocabulary and caption grammar
// ---------------------------------------------------------------------------

struct Vocabulary {
    std::vector<std::string> words;  // id -> word, dense from 0

    int id(const std::string& w) const;
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words.size()); }
};

const Vocabulary& vocab();

// special token ids
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kBoi = 3;
constexpr int kEoi = 4;
constexpr int kNull = 5;

// canonical caption "a {color} {shape} in the {quadrant}", 6 tokens
std::vector<int> caption_of(const SceneSpec& spec);
std::string caption_text(const SceneSpec& spec);

// strict inverse of caption_of; anything else is a no-match
std::optional<SceneSpec> parse_caption(const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// text-only grammar (captions plus distractor sentences)
// ---------------------------------------------------------------------------

struct SentenceTemplate {
    std::vector<std::string> pattern;  // literal words, or slots "{c}" "{s}" "{q}" ("{s}" repeats bind)
    int weight;
};

const std::vector<SentenceTemplate>& sentence_templates();

// one weighted-template sentence; slots drawn uniformly
std::vector<int> sample_sentence(Rng& rng);

// sentences are appended while the body is shorter than this many tokens
constexpr int kTextBodyTarget = 56;
constexpr int kSeqLen = 80;

// [BOS, sentences..., EOS, PAD...] of fixed length kSeqLen
std::vector<int> sample_text_body(Rng& rng);

// ---------------------------------------------------------------------------
// multimodal sequences
// ---------------------------------------------------------------------------

enum class SampleKind { T2I, I2T, TextOnly };
enum class Modality { Text, Image, Pad };

const char* kind_name(SampleKind k);

struct MultimodalSequence {
    SampleKind kind = SampleKind::TextOnly;
    std::vector<int> ids;           // kSeqLen; image positions carry -1
    std::vector<Modality> modality; // kSeqLen
    int boi_pos = -1;
    int eoi_pos = -1;
    float t = 0.0f;                 // diffusion timestep for the image span
    std::optional<SceneSpec> scene;
    std::vector<float> clean_patches;   // kNumPatches*kPatchDim when image present
    std::vector<float> noised_patches;  // same shape; equals clean at t=0

    bool has_image() const { return boi_pos >= 0; }
    int image_begin() const { return boi_pos + 1; }
    int image_end() const { return eoi_pos; }  // exclusive
    int used_length() const;                   // positions before padding
};

// layout rules:
//   T2I:  [BOS caption BOI patches... EOI EOS PAD...]
//   I2T:  [BOS BOI patches... EOI caption EOS PAD...]
//   TextOnly: [BOS sentences... EOS PAD...]
MultimodalSequence assemble(SampleKind kind, const SceneSpec& spec);
MultimodalSequence assemble_text_only(Rng& rng);

// caption replaced by <null> tokens; used for classifier-free guidance
void drop_caption(MultimodalSequence& seq);

// throws std::logic_error on any violated sequence invariant
void validate_sequence(const MultimodalSequence& seq);

// ---------------------------------------------------------------------------
// sample mixing and splits
// ---------------------------------------------------------------------------

struct MixRatios {
    double t2i = 2.0 / 3.0;
    double i2t = 1.0 / 3.0;
    // remainder is TextOnly
};

// throws std::invalid_argument on negative ratios, sum > 1 or all-zero mixes
SampleKind draw_kind(Rng& rng, const MixRatios& ratios);

// deterministic scene split keyed on a hash of the spec
bool scene_is_heldout(const SceneSpec& spec);
const std::vector<SceneSpec>& train_scenes();
const std::vector<SceneSpec>& heldout_scenes();
SceneSpec draw_scene(Rng& rng, bool heldout = false);

// dataset manifest rows: kind shape color quadrant seed
struct ManifestRow {
    SampleKind kind;
    SceneSpec scene;  // ignored for TextOnly
    uint64_t seed;
};
void write_dataset_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_dataset_manifest(const std::string& path);

}  // namespace xfusion
