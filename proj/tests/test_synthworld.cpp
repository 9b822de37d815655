#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "testutil.hpp"
#include "xfusion/rng.hpp"
#include "xfusion/synthworld.hpp"

using namespace xfusion;

TEST_CASE("renderer places the shape in the right quadrant deterministically") {
    SceneSpec spec{ShapeKind::Square, ColorKind::Red, QuadrantKind::TopLeft};
    auto img = render_scene(spec);

    // the only high-red pixels live in the top-left 8x8 block
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const bool inside = y < 8 && x < 8;
            if (img.at(0, y, x) > 0.5f) CHECK(inside);
            if (!inside) CHECK(img.at(0, y, x) == kBackgroundLevel);
        }

    auto again = render_scene(spec);
    CHECK(img.pix == again.pix);
}

TEST_CASE("all 48 scenes render pairwise distinct images") {
    auto scenes = all_scenes();
    REQUIRE(scenes.size() == 48);
    std::vector<ImageLatent> imgs;
    for (const auto& s : scenes) imgs.push_back(render_scene(s));
    for (size_t i = 0; i < imgs.size(); ++i)
        for (size_t j = i + 1; j < imgs.size(); ++j) {
            double l2 = 0;
            for (int p = 0; p < ImageLatent::kPixels; ++p) {
                const double dlt = imgs[i].pix[p] - imgs[j].pix[p];
                l2 += dlt * dlt;
            }
            CHECK(l2 > 0.0);
        }
}

TEST_CASE("caption round-trip and parser rejections") {
    SceneSpec spec{ShapeKind::Circle, ColorKind::Blue, QuadrantKind::BottomRight};
    CHECK(caption_text(spec) == "a blue circle in the bottom-right");
    auto back = parse_caption(caption_of(spec));
    REQUIRE(back.has_value());
    CHECK(*back == spec);

    const auto& v = vocab();
    std::vector<int> doubled{v.id("a"), v.id("blue"), v.id("blue"), v.id("circle")};
    CHECK_FALSE(parse_caption(doubled).has_value());

    // fuzz: random garbage of length 7 never parses; any random length-6 draw
    // either rejects or round-trips to its own canonical caption
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<int> junk(7);
        for (auto& t : junk) t = static_cast<int>(rng.below(v.size()));
        CHECK_FALSE(parse_caption(junk).has_value());
        std::vector<int> six(6);
        for (auto& t : six) t = static_cast<int>(rng.below(v.size()));
        auto parsed = parse_caption(six);
        if (parsed) CHECK(caption_of(*parsed) == six);
    }
}

TEST_CASE("parser accepts exactly the 48 canonical captions over grammar words") {
    // exhaustive over all length-6 sequences of caption-grammar words
    const auto& v = vocab();
    std::vector<int> grammar_ids;
    for (const char* w : {"a", "in", "the", "red", "green", "blue", "yellow", "square", "circle",
                          "triangle", "top-left", "top-right", "bottom-left", "bottom-right"})
        grammar_ids.push_back(v.id(w));
    const int n = static_cast<int>(grammar_ids.size());
    REQUIRE(n == 14);

    long accepted = 0;
    std::vector<int> tokens(6);
    std::array<int, 6> odo{};
    while (true) {
        for (int i = 0; i < 6; ++i) tokens[i] = grammar_ids[odo[i]];
        if (parse_caption(tokens)) ++accepted;
        int pos = 5;
        while (pos >= 0 && ++odo[pos] == n) odo[pos--] = 0;
        if (pos < 0) break;
    }
    CHECK(accepted == 48);

    // shorter sequences never parse
    for (int len = 0; len <= 5; ++len) {
        std::vector<int> t(len, v.id("a"));
        CHECK_FALSE(parse_caption(t).has_value());
    }
}

TEST_CASE("patchify shapes and exact inverse") {
    SceneSpec spec{ShapeKind::Triangle, ColorKind::Green, QuadrantKind::TopRight};
    auto img = render_scene(spec);
    auto patches = patchify(img);
    CHECK(patches.size() == 64u * 12u);

    auto back = unpatchify(patches);
    CHECK(back.pix == img.pix);

    ImageLatent constant;
    constant.pix.fill(0.37f);
    auto cp = patchify(constant);
    for (float v : cp) CHECK(v == 0.37f);

    CHECK_THROWS_AS(unpatchify(std::vector<float>(100)), std::invalid_argument);
}

TEST_CASE("assembled layouts follow the kind conventions") {
    SceneSpec spec{ShapeKind::Square, ColorKind::Yellow, QuadrantKind::BottomLeft};

    auto t2i = assemble(SampleKind::T2I, spec);
    validate_sequence(t2i);
    // text span strictly precedes the image span
    for (int p = 1; p < t2i.boi_pos; ++p) CHECK(t2i.modality[p] == Modality::Text);
    CHECK(t2i.boi_pos == 7);  // BOS + 6 caption tokens
    CHECK(t2i.eoi_pos == t2i.boi_pos + 65);
    CHECK(t2i.ids[t2i.eoi_pos + 1] == kEos);

    auto i2t = assemble(SampleKind::I2T, spec);
    validate_sequence(i2t);
    CHECK(i2t.boi_pos == 1);
    // caption follows the image span
    std::vector<int> cap(i2t.ids.begin() + i2t.eoi_pos + 1, i2t.ids.begin() + i2t.eoi_pos + 7);
    auto parsed = parse_caption(cap);
    REQUIRE(parsed.has_value());
    CHECK(*parsed == spec);

    CHECK(t2i.clean_patches == i2t.clean_patches);

    Rng rng(5);
    auto text = assemble_text_only(rng);
    validate_sequence(text);
    CHECK_FALSE(text.has_image());
    for (auto m : text.modality) CHECK(m != Modality::Image);

    // validator rejects a broken span
    auto broken = assemble(SampleKind::T2I, spec);
    broken.modality[broken.boi_pos + 3] = Modality::Text;
    broken.ids[broken.boi_pos + 3] = kPad;
    CHECK_THROWS_AS(validate_sequence(broken), std::logic_error);
}

TEST_CASE("caption dropout nulls the prompt only") {
    SceneSpec spec{ShapeKind::Circle, ColorKind::Red, QuadrantKind::TopLeft};
    auto seq = assemble(SampleKind::T2I, spec);
    drop_caption(seq);
    for (int p = 1; p < seq.boi_pos; ++p) CHECK(seq.ids[p] == kNull);
    CHECK(seq.ids[0] == kBos);
    CHECK(seq.ids[seq.boi_pos] == kBoi);
    validate_sequence(seq);
}

TEST_CASE("kind mixing matches configured ratios") {
    SUBCASE("two-to-one ratio lands within two points of 66.7%") {
        Rng rng(1234);
        MixRatios r{2.0 / 3.0, 1.0 / 3.0};
        int t2i = 0;
        const int n = 10000;
        for (int i = 0; i < n; ++i)
            if (draw_kind(rng, r) == SampleKind::T2I) ++t2i;
        const double frac = static_cast<double>(t2i) / n;
        CHECK(frac > 2.0 / 3.0 - 0.02);
        CHECK(frac < 2.0 / 3.0 + 0.02);
    }
    SUBCASE("degenerate mixes") {
        Rng rng(7);
        for (int i = 0; i < 200; ++i) CHECK(draw_kind(rng, {1.0, 0.0}) == SampleKind::T2I);
        for (int i = 0; i < 200; ++i) CHECK(draw_kind(rng, {0.0, 1.0}) == SampleKind::I2T);
        CHECK_THROWS_AS(draw_kind(rng, {0.0, 0.0}), std::invalid_argument);
        CHECK_THROWS_AS(draw_kind(rng, {0.8, 0.3}), std::invalid_argument);
        CHECK_THROWS_AS(draw_kind(rng, {-0.1, 0.5}), std::invalid_argument);
    }
}

TEST_CASE("scene split is disjoint and covers every attribute value") {
    const auto& train = train_scenes();
    const auto& held = heldout_scenes();
    CHECK(train.size() + held.size() == 48);
    CHECK(held.size() >= 4);
    CHECK(held.size() <= 14);

    std::set<int> train_idx;
    for (const auto& s : train) train_idx.insert(scene_index(s));
    for (const auto& s : held) CHECK(train_idx.count(scene_index(s)) == 0);

    std::set<int> shapes, colors, quads;
    for (const auto& s : train) {
        shapes.insert(static_cast<int>(s.shape));
        colors.insert(static_cast<int>(s.color));
        quads.insert(static_cast<int>(s.quadrant));
    }
    CHECK(shapes.size() == kNumShapes);
    CHECK(colors.size() == kNumColors);
    CHECK(quads.size() == kNumQuadrants);
}

TEST_CASE("sampling is a pure function of the stream seed") {
    auto draw = [](uint64_t seed) {
        Rng rng(seed);
        auto seq = assemble_text_only(rng);
        return testutil::fnv1a_bytes(seq.ids.data(), seq.ids.size() * sizeof(int));
    };
    CHECK(draw(42) == draw(42));
    CHECK(draw(42) != draw(43));

    Rng a(9);
    Rng b = a.split("stream");
    Rng c = a.split("stream");
    CHECK(b.next_u64() == c.next_u64());
    CHECK(a.split("x").next_u64() != a.split("y").next_u64());
}

TEST_CASE("text bodies respect the length budget") {
    Rng rng(77);
    for (int i = 0; i < 200; ++i) {
        auto seq = assemble_text_only(rng);
        validate_sequence(seq);
        const int used = seq.used_length();
        CHECK(used >= kTextBodyTarget);   // BOS + body + EOS
        CHECK(used <= kSeqLen);
        CHECK(seq.ids[used - 1] == kEos);
    }
}

TEST_CASE("dataset manifest round-trips") {
    std::vector<ManifestRow> rows = {
        {SampleKind::T2I, {ShapeKind::Circle, ColorKind::Blue, QuadrantKind::TopRight}, 11},
        {SampleKind::TextOnly, {}, 12},
        {SampleKind::I2T, {ShapeKind::Square, ColorKind::Red, QuadrantKind::BottomLeft}, 13},
    };
    const std::string path = "manifest_test.txt";
    write_dataset_manifest(path, rows);
    auto back = read_dataset_manifest(path);
    std::remove(path.c_str());
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].kind == rows[i].kind);
        CHECK(back[i].seed == rows[i].seed);
        if (rows[i].kind != SampleKind::TextOnly) CHECK(back[i].scene == rows[i].scene);
    }
}

TEST_CASE("ppm dump writes a readable file") {
    auto img = render_scene({ShapeKind::Circle, ColorKind::Yellow, QuadrantKind::BottomRight});
    const std::string path = "dump_test.ppm";
    write_ppm(path, img);
    FILE* f = fopen(path.c_str(), "rb");
    REQUIRE(f != nullptr);
    char header[3] = {};
    REQUIRE(fread(header, 1, 2, f) == 2);
    fclose(f);
    std::remove(path.c_str());
    CHECK(header[0] == 'P');
    CHECK(header[1] == '6');
}
