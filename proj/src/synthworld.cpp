#include "xfusion/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace xfusion {

// ---------------------------------------------------------------------------
// scene enumeration
// ---------------------------------------------------------------------------

int scene_index(const SceneSpec& s) {
    return (static_cast<int>(s.shape) * kNumColors + static_cast<int>(s.color)) * kNumQuadrants +
           static_cast<int>(s.quadrant);
}

SceneSpec scene_from_index(int idx) {
    if (idx < 0 || idx >= kNumScenes) throw std::out_of_range("scene index " + std::to_string(idx));
    SceneSpec s;
    s.quadrant = static_cast<QuadrantKind>(idx % kNumQuadrants);
    idx /= kNumQuadrants;
    s.color = static_cast<ColorKind>(idx % kNumColors);
    s.shape = static_cast<ShapeKind>(idx / kNumColors);
    return s;
}

std::vector<SceneSpec> all_scenes() {
    std::vector<SceneSpec> v;
    v.reserve(kNumScenes);
    for (int i = 0; i < kNumScenes; ++i) v.push_back(scene_from_index(i));
    return v;
}

const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::Square: return "square";
        case ShapeKind::Circle: return "circle";
        case ShapeKind::Triangle: return "triangle";
    }
    return "?";
}

const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return "red";
        case ColorKind::Green: return "green";
        case ColorKind::Blue: return "blue";
        case ColorKind::Yellow: return "yellow";
    }
    return "?";
}

const char* quadrant_name(QuadrantKind q) {
    switch (q) {
        case QuadrantKind::TopLeft: return "top-left";
        case QuadrantKind::TopRight: return "top-right";
        case QuadrantKind::BottomLeft: return "bottom-left";
        case QuadrantKind::BottomRight: return "bottom-right";
    }
    return "?";
}

std::optional<ShapeKind> shape_from_name(const std::string& s) {
    for (int i = 0; i < kNumShapes; ++i)
        if (s == shape_name(static_cast<ShapeKind>(i))) return static_cast<ShapeKind>(i);
    return std::nullopt;
}

std::optional<ColorKind> color_from_name(const std::string& s) {
    for (int i = 0; i < kNumColors; ++i)
        if (s == color_name(static_cast<ColorKind>(i))) return static_cast<ColorKind>(i);
    return std::nullopt;
}

std::optional<QuadrantKind> quadrant_from_name(const std::string& s) {
    for (int i = 0; i < kNumQuadrants; ++i)
        if (s == quadrant_name(static_cast<QuadrantKind>(i))) return static_cast<QuadrantKind>(i);
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// renderer
// ---------------------------------------------------------------------------

std::array<bool, 64> shape_mask(ShapeKind s) {
    std::array<bool, 64> m{};
    auto set = [&m](int y, int x) { m[y * 8 + x] = true; };
    switch (s) {
        case ShapeKind::Square:
            for (int y = 1; y <= 6; ++y)
                for (int x = 1; x <= 6; ++x) set(y, x);
            break;
        case ShapeKind::Circle:
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const float dy = y - 3.5f, dx = x - 3.5f;
                    if (dy * dy + dx * dx <= 3.2f * 3.2f) set(y, x);
                }
            break;
        case ShapeKind::Triangle:
            for (int y = 1; y <= 6; ++y) {
                const float half = 0.2f + 0.62f * (y - 1);
                for (int x = 0; x < 8; ++x)
                    if (std::abs(x - 3.5f) <= half) set(y, x);
            }
            break;
    }
    return m;
}

std::array<float, 3> color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return {1.0f, -1.0f, -1.0f};
        case ColorKind::Green: return {-1.0f, 1.0f, -1.0f};
        case ColorKind::Blue: return {-1.0f, -1.0f, 1.0f};
        case ColorKind::Yellow: return {1.0f, 1.0f, -1.0f};
    }
    return {0, 0, 0};
}

ImageLatent render_scene(const SceneSpec& spec) {
    ImageLatent img;
    img.pix.fill(kBackgroundLevel);
    const auto mask = shape_mask(spec.shape);
    const auto rgb = color_rgb(spec.color);
    const int oy = (spec.quadrant == QuadrantKind::BottomLeft || spec.quadrant == QuadrantKind::BottomRight) ? 8 : 0;
    const int ox = (spec.quadrant == QuadrantKind::TopRight || spec.quadrant == QuadrantKind::BottomRight) ? 8 : 0;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            if (mask[y * 8 + x])
                for (int c = 0; c < 3; ++c) img.at(c, oy + y, ox + x) = rgb[c];
    return img;
}

void write_ppm(const std::string& path, const ImageLatent& img) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "P6\n" << ImageLatent::kWidth << " " << ImageLatent::kHeight << "\n255\n";
    for (int y = 0; y < ImageLatent::kHeight; ++y)
        for (int x = 0; x < ImageLatent::kWidth; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(c, y, x), -1.0f, 1.0f);
                const auto b = static_cast<unsigned char>(std::lround((v + 1.0f) * 127.5f));
                f.write(reinterpret_cast<const char*>(&b), 1);
            }
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

std::vector<float> patchify(const ImageLatent& img) {
    static_assert(ImageLatent::kHeight % kPatchSize == 0 && ImageLatent::kWidth % kPatchSize == 0);
    const int grid = ImageLatent::kWidth / kPatchSize;
    std::vector<float> out(kNumPatches * kPatchDim);
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            float* v = out.data() + (pr * grid + pc) * kPatchDim;
            for (int c = 0; c < ImageLatent::kChannels; ++c)
                for (int dy = 0; dy < kPatchSize; ++dy)
                    for (int dx = 0; dx < kPatchSize; ++dx)
                        v[(c * kPatchSize + dy) * kPatchSize + dx] =
                            img.at(c, pr * kPatchSize + dy, pc * kPatchSize + dx);
        }
    return out;
}

ImageLatent unpatchify(const std::vector<float>& patches) {
    if (patches.size() != static_cast<size_t>(kNumPatches * kPatchDim))
        throw std::invalid_argument("unpatchify: expected " + std::to_string(kNumPatches * kPatchDim) +
                                    " values, got " + std::to_string(patches.size()));
    const int grid = ImageLatent::kWidth / kPatchSize;
    ImageLatent img;
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const float* v = patches.data() + (pr * grid + pc) * kPatchDim;
            for (int c = 0; c < ImageLatent::kChannels; ++c)
                for (int dy = 0; dy < kPatchSize; ++dy)
                    for (int dx = 0; dx < kPatchSize; ++dx)
                        img.at(c, pr * kPatchSize + dy, pc * kPatchSize + dx) =
                            v[(c * kPatchSize + dy) * kPatchSize + dx];
        }
    return img;
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

const Vocabulary& vocab() {
    static const Vocabulary v = [] {
        Vocabulary vc;
        vc.words = {
            "<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<null>",
            // function words
            "a", "in", "the", "is", "there", "here", "of", "and", "not", "very",
            // colors
            "red", "green", "blue", "yellow",
            // shapes
            "square", "circle", "triangle",
            // quadrants
            "top-left", "top-right", "bottom-left", "bottom-right",
            // distractor content
            "picture", "scene", "corner", "nothing", "shows", "looks", "nice",
            "quiet", "today", "small", "still",
            ".",
        };
        return vc;
    }();
    return v;
}

int Vocabulary::id(const std::string& w) const {
    static const std::map<std::string, int> index = [] {
        std::map<std::string, int> m;
        const auto& ws = vocab().words;
        for (size_t i = 0; i < ws.size(); ++i) m[ws[i]] = static_cast<int>(i);
        return m;
    }();
    auto it = index.find(w);
    if (it == index.end()) throw std::out_of_range("word not in vocabulary: '" + w + "'");
    return it->second;
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id));
    return words[id];
}

// ---------------------------------------------------------------------------
// captions
// ---------------------------------------------------------------------------

std::vector<int> caption_of(const SceneSpec& spec) {
    const auto& v = vocab();
    return {v.id("a"),  v.id(color_name(spec.color)), v.id(shape_name(spec.shape)),
            v.id("in"), v.id("the"),                  v.id(quadrant_name(spec.quadrant))};
}

std::string caption_text(const SceneSpec& spec) {
    std::string s;
    for (int id : caption_of(spec)) {
        if (!s.empty()) s += ' ';
        s += vocab().word(id);
    }
    return s;
}

std::optional<SceneSpec> parse_caption(const std::vector<int>& tokens) {
    const auto& v = vocab();
    if (tokens.size() != 6) return std::nullopt;
    for (int id : tokens)
        if (id < 0 || id >= v.size()) return std::nullopt;
    if (tokens[0] != v.id("a") || tokens[3] != v.id("in") || tokens[4] != v.id("the")) return std::nullopt;
    auto color = color_from_name(v.word(tokens[1]));
    auto shape = shape_from_name(v.word(tokens[2]));
    auto quadrant = quadrant_from_name(v.word(tokens[5]));
    if (!color || !shape || !quadrant) return std::nullopt;
    return SceneSpec{*shape, *color, *quadrant};
}

// ---------------------------------------------------------------------------
// text-only grammar
// ---------------------------------------------------------------------------

const std::vector<SentenceTemplate>& sentence_templates() {
    static const std::vector<SentenceTemplate> ts = {
        {{"a", "{c}", "{s}", "in", "the", "{q}", "."}, 3},
        {{"the", "picture", "shows", "a", "{c}", "{s}", "in", "the", "{q}", "."}, 1},
        {{"there", "is", "nothing", "in", "the", "{q}", "corner", "."}, 1},
        {{"the", "scene", "looks", "very", "quiet", "and", "very", "still", "and", "very", "nice", "today", "."}, 2},
        {{"here", "is", "a", "small", "picture", "of", "a", "quiet", "and", "nice", "scene", "."}, 2},
        {{"the", "{c}", "scene", "looks", "very", "nice", "today", "."}, 1},
        {{"a", "{s}", "is", "a", "{s}", "and", "not", "a", "picture", "."}, 1},
        {{"the", "picture", "of", "the", "scene", "shows", "the", "scene", "of", "the", "picture", "."}, 2},
    };
    return ts;
}

std::vector<int> sample_sentence(Rng& rng) {
    const auto& ts = sentence_templates();
    int total = 0;
    for (const auto& t : ts) total += t.weight;
    int pick = static_cast<int>(rng.below(static_cast<uint64_t>(total)));
    size_t ti = 0;
    for (; ti < ts.size(); ++ti) {
        pick -= ts[ti].weight;
        if (pick < 0) break;
    }
    const auto& tpl = ts[ti];
    const auto& v = vocab();

    // slots repeat-bind within a sentence: the second {s} copies the first
    int c = -1, s = -1, q = -1;
    std::vector<int> out;
    out.reserve(tpl.pattern.size());
    for (const auto& w : tpl.pattern) {
        if (w == "{c}") {
            if (c < 0) c = static_cast<int>(rng.below(kNumColors));
            out.push_back(v.id(color_name(static_cast<ColorKind>(c))));
        } else if (w == "{s}") {
            if (s < 0) s = static_cast<int>(rng.below(kNumShapes));
            out.push_back(v.id(shape_name(static_cast<ShapeKind>(s))));
        } else if (w == "{q}") {
            if (q < 0) q = static_cast<int>(rng.below(kNumQuadrants));
            out.push_back(v.id(quadrant_name(static_cast<QuadrantKind>(q))));
        } else {
            out.push_back(v.id(w));
        }
    }
    return out;
}

std::vector<int> sample_text_body(Rng& rng) {
    std::vector<int> body;
    while (static_cast<int>(body.size()) < kTextBodyTarget) {
        auto s = sample_sentence(rng);
        body.insert(body.end(), s.begin(), s.end());
    }
    return body;
}

// ---------------------------------------------------------------------------
// sequence assembly
// ---------------------------------------------------------------------------

const char* kind_name(SampleKind k) {
    switch (k) {
        case SampleKind::T2I: return "t2i";
        case SampleKind::I2T: return "i2t";
        case SampleKind::TextOnly: return "text";
    }
    return "?";
}

int MultimodalSequence::used_length() const {
    int n = 0;
    for (auto m : modality)
        if (m != Modality::Pad) ++n;
    return n;
}

namespace {

MultimodalSequence blank_sequence(SampleKind kind) {
    MultimodalSequence seq;
    seq.kind = kind;
    seq.ids.assign(kSeqLen, kPad);
    seq.modality.assign(kSeqLen, Modality::Pad);
    return seq;
}

void push_text(MultimodalSequence& seq, int& pos, int id) {
    if (pos >= kSeqLen) throw std::logic_error("sequence overflow while assembling");
    seq.ids[pos] = id;
    seq.modality[pos] = Modality::Text;
    ++pos;
}

void push_image_span(MultimodalSequence& seq, int& pos, const SceneSpec& spec) {
    push_text(seq, pos, kBoi);
    seq.boi_pos = pos - 1;
    for (int p = 0; p < kNumPatches; ++p) {
        if (pos >= kSeqLen) throw std::logic_error("sequence overflow while assembling");
        seq.ids[pos] = -1;
        seq.modality[pos] = Modality::Image;
        ++pos;
    }
    push_text(seq, pos, kEoi);
    seq.eoi_pos = pos - 1;
    seq.scene = spec;
    seq.clean_patches = patchify(render_scene(spec));
    seq.noised_patches = seq.clean_patches;
    seq.t = 0.0f;
}

}  // namespace

MultimodalSequence assemble(SampleKind kind, const SceneSpec& spec) {
    MultimodalSequence seq = blank_sequence(kind);
    int pos = 0;
    push_text(seq, pos, kBos);
    switch (kind) {
        case SampleKind::T2I:
            for (int id : caption_of(spec)) push_text(seq, pos, id);
            push_image_span(seq, pos, spec);
            push_text(seq, pos, kEos);
            break;
        case SampleKind::I2T:
            push_image_span(seq, pos, spec);
            for (int id : caption_of(spec)) push_text(seq, pos, id);
            push_text(seq, pos, kEos);
            break;
        case SampleKind::TextOnly:
            throw std::invalid_argument("assemble: TextOnly takes a text stream, use assemble_text_only");
    }
    return seq;
}

MultimodalSequence assemble_text_only(Rng& rng) {
    MultimodalSequence seq = blank_sequence(SampleKind::TextOnly);
    int pos = 0;
    push_text(seq, pos, kBos);
    for (int id : sample_text_body(rng)) push_text(seq, pos, id);
    push_text(seq, pos, kEos);
    return seq;
}

void drop_caption(MultimodalSequence& seq) {
    if (seq.kind != SampleKind::T2I) throw std::invalid_argument("drop_caption: only T2I carries a prompt");
    for (int p = 1; p < seq.boi_pos; ++p) seq.ids[p] = kNull;
}

void validate_sequence(const MultimodalSequence& seq) {
    auto fail = [](const std::string& why) { throw std::logic_error("invalid sequence: " + why); };
    if (static_cast<int>(seq.ids.size()) != kSeqLen || static_cast<int>(seq.modality.size()) != kSeqLen)
        fail("wrong length");
    if (seq.modality[0] != Modality::Text || seq.ids[0] != kBos) fail("missing BOS");

    int first_pad = kSeqLen;
    for (int p = 0; p < kSeqLen; ++p) {
        const bool pad = seq.modality[p] == Modality::Pad;
        if (pad && first_pad == kSeqLen) first_pad = p;
        if (!pad && first_pad != kSeqLen) fail("padding is not a suffix");
        if (pad && seq.ids[p] != kPad) fail("pad position carries a token");
    }

    std::vector<int> image_positions;
    for (int p = 0; p < kSeqLen; ++p)
        if (seq.modality[p] == Modality::Image) image_positions.push_back(p);

    if (seq.kind == SampleKind::TextOnly) {
        if (!image_positions.empty() || seq.has_image()) fail("TextOnly contains image positions");
    } else {
        if (image_positions.size() != kNumPatches) fail("image span must hold all patches");
        for (size_t i = 1; i < image_positions.size(); ++i)
            if (image_positions[i] != image_positions[i - 1] + 1) fail("image span is not contiguous");
        const int begin = image_positions.front(), end = image_positions.back() + 1;
        if (seq.boi_pos != begin - 1 || seq.ids[seq.boi_pos] != kBoi) fail("image span not preceded by BOI");
        if (seq.eoi_pos != end || seq.ids[seq.eoi_pos] != kEoi) fail("image span not followed by EOI");
        if (seq.clean_patches.size() != static_cast<size_t>(kNumPatches * kPatchDim)) fail("missing clean patches");
        if (seq.noised_patches.size() != seq.clean_patches.size()) fail("missing noised patches");
        if (seq.t < 0.0f || seq.t > 1.0f) fail("timestep out of range");
    }
    for (int p = 0; p < kSeqLen; ++p) {
        if (seq.modality[p] == Modality::Text && (seq.ids[p] < 0 || seq.ids[p] >= vocab().size()))
            fail("text token out of vocabulary");
        if (seq.modality[p] == Modality::Image && seq.ids[p] != -1) fail("image position carries a token id");
    }
}

// ---------------------------------------------------------------------------
// mixing and splits
// ---------------------------------------------------------------------------

SampleKind draw_kind(Rng& rng, const MixRatios& r) {
    if (r.t2i < 0 || r.i2t < 0) throw std::invalid_argument("mix ratios must be non-negative");
    if (r.t2i + r.i2t > 1.0 + 1e-12) throw std::invalid_argument("mix ratios sum above one");
    if (r.t2i == 0 && r.i2t == 0) throw std::invalid_argument("all-zero mix has no multimodal samples");
    const double u = rng.uniform();
    if (u < r.t2i) return SampleKind::T2I;
    if (u < r.t2i + r.i2t) return SampleKind::I2T;
    return SampleKind::TextOnly;
}

bool scene_is_heldout(const SceneSpec& spec) {
    const uint64_t h = Rng::hash_str(std::string("scene-split/") + shape_name(spec.shape) + "/" +
                                     color_name(spec.color) + "/" + quadrant_name(spec.quadrant));
    return h % 6 == 0;
}

const std::vector<SceneSpec>& train_scenes() {
    static const std::vector<SceneSpec> v = [] {
        std::vector<SceneSpec> out;
        for (const auto& s : all_scenes())
            if (!scene_is_heldout(s)) out.push_back(s);
        return out;
    }();
    return v;
}

const std::vector<SceneSpec>& heldout_scenes() {
    static const std::vector<SceneSpec> v = [] {
        std::vector<SceneSpec> out;
        for (const auto& s : all_scenes())
            if (scene_is_heldout(s)) out.push_back(s);
        return out;
    }();
    return v;
}

SceneSpec draw_scene(Rng& rng, bool heldout) {
    const auto& pool = heldout ? heldout_scenes() : train_scenes();
    return pool[rng.below(pool.size())];
}

// ---------------------------------------------------------------------------
// dataset manifest
// ---------------------------------------------------------------------------

void write_dataset_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "# kind shape color quadrant seed\n";
    for (const auto& r : rows) {
        if (r.kind == SampleKind::TextOnly)
            f << kind_name(r.kind) << " - - - " << r.seed << "\n";
        else
            f << kind_name(r.kind) << " " << shape_name(r.scene.shape) << " " << color_name(r.scene.color)
              << " " << quadrant_name(r.scene.quadrant) << " " << r.seed << "\n";
    }
}

std::vector<ManifestRow> read_dataset_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string kind, shape, color, quadrant;
        uint64_t seed;
        if (!(ss >> kind >> shape >> color >> quadrant >> seed))
            throw std::runtime_error("bad manifest row: " + line);
        ManifestRow r;
        r.seed = seed;
        if (kind == "t2i")
            r.kind = SampleKind::T2I;
        else if (kind == "i2t")
            r.kind = SampleKind::I2T;
        else if (kind == "text")
            r.kind = SampleKind::TextOnly;
        else
            throw std::runtime_error("bad kind in manifest row: " + line);
        if (r.kind != SampleKind::TextOnly) {
            auto s = shape_from_name(shape);
            auto c = color_from_name(color);
            auto q = quadrant_from_name(quadrant);
            if (!s || !c || !q) throw std::runtime_error("bad scene in manifest row: " + line);
            r.scene = SceneSpec{*s, *c, *q};
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace xfusion
