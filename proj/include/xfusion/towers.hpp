#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfusion/ops.hpp"
#include "xfusion/optim.hpp"
#include "xfusion/rng.hpp"
#include "xfusion/synthworld.hpp"
#include "xfusion/tensor.hpp"

namespace xfusion {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class TowerVariant { SingleTower, GatedTower, DualProjection, DualTower };

const char* variant_name(TowerVariant v);
std::optional<TowerVariant> variant_from_name(const std::string& s);

struct ModelConfig {
    int layers = 4;
    int dim = 64;        // text tower width
    int dim_v = 64;      // vision tower width; differs only with X-Fuse projections
    int heads = 4;
    int heads_v = 4;
    int vocab_size = 0;  // filled from the vocabulary by default
    int patch_dim = kPatchDim;
    int max_seq = kSeqLen;
    TowerVariant variant = TowerVariant::DualTower;
    bool x_fuse = false;
    int align_layer = 2;            // 1-based; mid-stack by default
    float caption_dropout = 0.1f;

    int mlp_hidden() const { return hidden_for(dim); }
    int mlp_hidden_v() const { return hidden_for(dim_v); }

    static int hidden_for(int d) {
        const int raw = (8 * d + 2) / 3;
        return ((raw + 15) / 16) * 16;
    }

    void validate() const {
        if (layers < 1) throw std::invalid_argument("config: need at least one layer");
        if (dim % heads != 0)
            throw std::invalid_argument("config: head count " + std::to_string(heads) +
                                        " does not divide dim " + std::to_string(dim));
        if (dim_v % heads_v != 0)
            throw std::invalid_argument("config: vision head count " + std::to_string(heads_v) +
                                        " does not divide dim_v " + std::to_string(dim_v));
        if (x_fuse && variant != TowerVariant::DualTower)
            throw std::invalid_argument("config: X-Fuse requires the dual-tower variant");
        if (dim_v != dim && !x_fuse)
            throw std::invalid_argument("config: asymmetric tower dims require X-Fuse projections");
        if (align_layer < 1 || align_layer > layers)
            throw std::invalid_argument("config: alignment layer out of range");
        if (vocab_size < 1) throw std::invalid_argument("config: vocab size unset");
        if (max_seq < 2) throw std::invalid_argument("config: max sequence length too small");
        if (caption_dropout < 0.0f || caption_dropout >= 1.0f)
            throw std::invalid_argument("config: caption dropout must be in [0,1)");
    }
};

void write_model_card(const std::string& path, const ModelConfig& cfg);
ModelConfig read_model_card(const std::string& path);

// ---------------------------------------------------------------------------
// parameter construction
// ---------------------------------------------------------------------------
// Naming scheme:
//   emb.token, emb.pos_text, emb.patch.w/b, emb.pos_img
//   L<i>.txt.<attn.wq|attn.wk|attn.wv|attn.wo|mlp.up|mlp.gate|mlp.down|norm1|norm2>
//   L<i>.img.*            vision copies (dual tower / dual projection)
//   L<i>.gate.*, L<i>.gamma             gated variant
//   L<i>.xfuse.<alpha_t|beta_t|alpha_v|beta_v|p_v2t|p_t2v>
//   final_norm.txt, final_norm.img, head.text.w/b, head.vel.w/b

inline constexpr double kInitStd = 0.02;

template <typename T>
Tensor<T> init_normal(std::vector<int> shape, Rng rng) {
    return Tensor<T>::randn(std::move(shape), rng, T(kInitStd));
}

template <typename T>
void add_block_params(ParameterSet<T>& ps, const std::string& prefix, int d, int hidden, Rng& rng) {
    ps.add(prefix + ".attn.wq", init_normal<T>({d, d}, rng.split(prefix + ".attn.wq")));
    ps.add(prefix + ".attn.wk", init_normal<T>({d, d}, rng.split(prefix + ".attn.wk")));
    ps.add(prefix + ".attn.wv", init_normal<T>({d, d}, rng.split(prefix + ".attn.wv")));
    ps.add(prefix + ".attn.wo", init_normal<T>({d, d}, rng.split(prefix + ".attn.wo")));
    ps.add(prefix + ".mlp.up", init_normal<T>({d, hidden}, rng.split(prefix + ".mlp.up")));
    ps.add(prefix + ".mlp.gate", init_normal<T>({d, hidden}, rng.split(prefix + ".mlp.gate")));
    ps.add(prefix + ".mlp.down", init_normal<T>({hidden, d}, rng.split(prefix + ".mlp.down")));
    ps.add(prefix + ".norm1", Tensor<T>::filled({d}, T(1)));
    ps.add(prefix + ".norm2", Tensor<T>::filled({d}, T(1)));
}

// stage-1 text model: embeddings, text blocks, final norm, text head
template <typename T>
ParameterSet<T> init_stage1_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParameterSet<T> ps;
    Rng rng(seed);
    ps.add("emb.token", init_normal<T>({cfg.vocab_size, cfg.dim}, rng.split("emb.token")));
    ps.add("emb.pos_text", init_normal<T>({cfg.max_seq, cfg.dim}, rng.split("emb.pos_text")));
    for (int i = 0; i < cfg.layers; ++i)
        add_block_params(ps, "L" + std::to_string(i) + ".txt", cfg.dim, cfg.mlp_hidden(), rng);
    ps.add("final_norm.txt", Tensor<T>::filled({cfg.dim}, T(1)));
    ps.add("head.text.w", init_normal<T>({cfg.dim, cfg.vocab_size}, rng.split("head.text.w")));
    ps.add("head.text.b", Tensor<T>::zeros({cfg.vocab_size}));
    return ps;
}

template <typename T>
void copy_param(ParameterSet<T>& ps, const std::string& from, const std::string& to) {
    const auto& src = ps.at(from);
    ps.add(to, Tensor<T>::from_data(src.shape(), src.data()));
}

// stage-2 model: stage-1 weights plus the vision side for the chosen variant.
// Fresh parameters draw from seed-split streams keyed by name, so every
// variant sees identical multimodal initialization.
template <typename T>
ParameterSet<T> init_stage2_params(const ModelConfig& cfg, const ParameterSet<T>& stage1, uint64_t seed) {
    cfg.validate();
    ParameterSet<T> ps;
    ps.params = stage1.params;  // shared names; tensors are copied below to
    ps.frozen.clear();          // decouple storage from the stage-1 set
    for (auto& [name, t] : ps.params) {
        auto copy = Tensor<T>::from_data(t.shape(), t.data());
        copy.set_requires_grad(true);
        t = copy;
    }

    Rng rng(seed);
    ps.add("emb.patch.w", init_normal<T>({cfg.patch_dim, cfg.dim_v}, rng.split("emb.patch.w")));
    ps.add("emb.patch.b", Tensor<T>::zeros({cfg.dim_v}));
    ps.add("emb.pos_img", init_normal<T>({cfg.max_seq, cfg.dim_v}, rng.split("emb.pos_img")));
    ps.add("head.vel.w", init_normal<T>({cfg.dim_v, cfg.patch_dim}, rng.split("head.vel.w")));
    ps.add("head.vel.b", Tensor<T>::zeros({cfg.patch_dim}));
    if (cfg.dim_v == cfg.dim)
        copy_param(ps, "final_norm.txt", "final_norm.img");
    else
        ps.add("final_norm.img", Tensor<T>::filled({cfg.dim_v}, T(1)));

    const bool copies_possible = cfg.dim_v == cfg.dim;
    auto add_tower_copy = [&](const std::string& suffix) {
        for (int i = 0; i < cfg.layers; ++i) {
            const std::string src = "L" + std::to_string(i) + ".txt";
            const std::string dst = "L" + std::to_string(i) + "." + suffix;
            if (copies_possible) {
                for (const char* part : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.up",
                                         ".mlp.gate", ".mlp.down", ".norm1", ".norm2"})
                    copy_param(ps, src + part, dst + part);
            } else {
                add_block_params(ps, dst, cfg.dim_v, cfg.mlp_hidden_v(), rng);
            }
        }
    };

    switch (cfg.variant) {
        case TowerVariant::SingleTower:
            if (!copies_possible) throw std::invalid_argument("single tower requires dim_v == dim");
            break;
        case TowerVariant::GatedTower:
            if (!copies_possible) throw std::invalid_argument("gated tower requires dim_v == dim");
            add_tower_copy("gate");
            for (int i = 0; i < cfg.layers; ++i)
                ps.add("L" + std::to_string(i) + ".gamma", Tensor<T>::zeros({1}));
            break;
        case TowerVariant::DualProjection:
            if (!copies_possible) throw std::invalid_argument("dual projection requires dim_v == dim");
            add_tower_copy("img");
            break;
        case TowerVariant::DualTower:
            add_tower_copy("img");
            if (cfg.x_fuse) {
                for (int i = 0; i < cfg.layers; ++i) {
                    const std::string px = "L" + std::to_string(i) + ".xfuse";
                    ps.add(px + ".alpha_t", Tensor<T>::filled({1}, T(1)));
                    ps.add(px + ".beta_t", Tensor<T>::zeros({1}));
                    ps.add(px + ".alpha_v", Tensor<T>::filled({1}, T(1)));
                    ps.add(px + ".beta_v", Tensor<T>::zeros({1}));
                    if (cfg.dim_v != cfg.dim) {
                        ps.add(px + ".p_v2t", init_normal<T>({cfg.dim_v, cfg.dim}, rng.split(px + ".p_v2t")));
                        ps.add(px + ".p_t2v", init_normal<T>({cfg.dim, cfg.dim_v}, rng.split(px + ".p_t2v")));
                    }
                }
            }
            break;
    }

    // the language side stays frozen except when fine-tuning the single tower
    if (cfg.variant != TowerVariant::SingleTower) {
        ps.freeze("emb.token");
        ps.freeze("emb.pos_text");
        for (int i = 0; i < cfg.layers; ++i)
            for (const char* part : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.up",
                                     ".mlp.gate", ".mlp.down", ".norm1", ".norm2"})
                ps.freeze("L" + std::to_string(i) + ".txt" + part);
        ps.freeze("final_norm.txt");
        ps.freeze("head.text.w");
        ps.freeze("head.text.b");
    }
    return ps;
}

// ---------------------------------------------------------------------------
// sequence view and masks
// ---------------------------------------------------------------------------

template <typename T>
struct SeqView {
    int length = 0;                // trimmed length, PAD removed
    std::vector<int> text_pos;     // ascending absolute positions
    std::vector<int> text_ids;
    std::vector<int> img_pos;      // ascending, contiguous span (may be empty)
    std::vector<T> patches;        // [img_pos.size() x patch_dim], noised view
    T timestep = T(0);
    int img_begin = -1, img_end = -1;  // span bounds in absolute positions
};

template <typename T>
SeqView<T> make_seq_view(const MultimodalSequence& seq) {
    SeqView<T> sv;
    for (int p = 0; p < static_cast<int>(seq.modality.size()); ++p) {
        switch (seq.modality[p]) {
            case Modality::Text:
                sv.text_pos.push_back(p);
                sv.text_ids.push_back(seq.ids[p]);
                sv.length = p + 1;
                break;
            case Modality::Image:
                sv.img_pos.push_back(p);
                sv.length = p + 1;
                break;
            case Modality::Pad:
                break;
        }
    }
    if (!sv.img_pos.empty()) {
        sv.img_begin = sv.img_pos.front();
        sv.img_end = sv.img_pos.back() + 1;
        sv.patches.resize(seq.noised_patches.size());
        for (size_t i = 0; i < sv.patches.size(); ++i) sv.patches[i] = static_cast<T>(seq.noised_patches[i]);
        sv.timestep = static_cast<T>(seq.t);
    }
    return sv;
}

// causal attention with a bidirectional window over the image span
template <typename T>
std::vector<char> attention_mask(const SeqView<T>& sv) {
    const int L = sv.length;
    std::vector<char> m(static_cast<size_t>(L) * L, 0);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<size_t>(i) * L + j] = 1;
    if (sv.img_begin >= 0)
        for (int i = sv.img_begin; i < sv.img_end; ++i)
            for (int j = i + 1; j < sv.img_end; ++j) m[static_cast<size_t>(i) * L + j] = 1;
    return m;
}

template <typename T>
std::vector<char> mask_rows(const std::vector<char>& full, int L, const std::vector<int>& qpos) {
    std::vector<char> rows(qpos.size() * L);
    for (size_t i = 0; i < qpos.size(); ++i)
        std::copy_n(full.data() + static_cast<size_t>(qpos[i]) * L, L, rows.data() + i * L);
    return rows;
}

// parameter-free sinusoidal embedding of the diffusion timestep
template <typename T>
std::vector<T> timestep_embedding(T t, int dim) {
    std::vector<T> e(dim, T(0));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = static_cast<double>(t) * 1000.0 * freq;
        e[2 * i] = static_cast<T>(std::sin(arg));
        e[2 * i + 1] = static_cast<T>(std::cos(arg));
    }
    return e;
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardOutput {
    Tensor<T> text_logits;                 // [num text positions x vocab]
    Tensor<T> velocity;                    // [num image positions x patch_dim]
    std::vector<Tensor<T>> vision_hidden;  // routed image-stream state after each layer
};

namespace detail_towers {

template <typename T>
struct BlockRefs {
    Tensor<T> wq, wk, wv, wo, up, gate, down, norm1, norm2;
};

template <typename T>
BlockRefs<T> block_refs(ParamContext<T>& ctx, const std::string& prefix) {
    return {ctx(prefix + ".attn.wq"), ctx(prefix + ".attn.wk"), ctx(prefix + ".attn.wv"),
            ctx(prefix + ".attn.wo"), ctx(prefix + ".mlp.up"),  ctx(prefix + ".mlp.gate"),
            ctx(prefix + ".mlp.down"), ctx(prefix + ".norm1"),  ctx(prefix + ".norm2")};
}

template <typename T>
Tensor<T> swiglu(const Tensor<T>& x, const BlockRefs<T>& w) {
    return matmul(mul(silu(matmul(x, w.gate)), matmul(x, w.up)), w.down);
}

// pre-norm block output for the given query rows. `residual` must hold the
// same values as the full input at those rows.
template <typename T>
Tensor<T> block_rows(const Tensor<T>& full_in, const Tensor<T>& residual, const std::vector<int>& qpos,
                     const std::vector<char>& full_mask, int L, const BlockRefs<T>& w, int heads) {
    Tensor<T> n1 = rmsnorm(full_in, w.norm1);
    Tensor<T> k = matmul(n1, w.wk);
    Tensor<T> v = matmul(n1, w.wv);
    Tensor<T> q = matmul(gather_rows(n1, qpos), w.wq);
    Tensor<T> ctx = multihead_attention(q, k, v, heads, mask_rows<T>(full_mask, L, qpos));
    Tensor<T> a = add(residual, matmul(ctx, w.wo));
    return add(a, swiglu(rmsnorm(a, w.norm2), w));
}

template <typename T>
std::vector<int> iota_positions(int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace detail_towers

// Text rows: token embedding + learned position. Image rows: learned linear
// patch projection + learned position + sinusoidal timestep embedding.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> embed_streams(ParamContext<T>& ctx, const ModelConfig& cfg,
                                              const SeqView<T>& sv) {
    Tensor<T> xt =
        add(gather_rows(ctx("emb.token"), sv.text_ids), gather_rows(ctx("emb.pos_text"), sv.text_pos));
    Tensor<T> xi = Tensor<T>::zeros({0, cfg.dim_v});
    const int ni = static_cast<int>(sv.img_pos.size());
    if (ni > 0) {
        Tensor<T> patches = Tensor<T>::from_data({ni, cfg.patch_dim}, sv.patches);
        Tensor<T> proj = add_rowvec(matmul(patches, ctx("emb.patch.w")), ctx("emb.patch.b"));
        Tensor<T> pos = gather_rows(ctx("emb.pos_img"), sv.img_pos);
        Tensor<T> temb = Tensor<T>::from_data({cfg.dim_v}, timestep_embedding(sv.timestep, cfg.dim_v));
        xi = add_rowvec(add(proj, pos), temb);
    }
    return {xt, xi};
}

template <typename T>
ForwardOutput<T> model_forward(ParamContext<T>& ctx, const ModelConfig& cfg, const SeqView<T>& sv) {
    using namespace detail_towers;
    cfg.validate();
    if (sv.length > cfg.max_seq)
        throw std::invalid_argument("sequence length " + std::to_string(sv.length) + " exceeds max " +
                                    std::to_string(cfg.max_seq));
    const int L = sv.length;
    const int nt = static_cast<int>(sv.text_pos.size());
    const int ni = static_cast<int>(sv.img_pos.size());
    const bool has_img = ni > 0;
    const bool asym = cfg.dim_v != cfg.dim;
    const auto full_mask = attention_mask(sv);
    const auto all_pos = iota_positions<T>(L);

    auto [xt, xi] = embed_streams(ctx, cfg, sv);

    ForwardOutput<T> out;
    out.vision_hidden.reserve(cfg.layers);

    for (int layer = 0; layer < cfg.layers; ++layer) {
        const std::string lname = "L" + std::to_string(layer);
        const auto txt = block_refs(ctx, lname + ".txt");

        switch (cfg.variant) {
            case TowerVariant::SingleTower: {
                Tensor<T> full = has_img ? assemble_rows(L, sv.text_pos, xt, sv.img_pos, xi) : xt;
                Tensor<T> o = block_rows(full, full, all_pos, full_mask, L, txt, cfg.heads);
                xt = gather_rows(o, sv.text_pos);
                if (has_img) xi = gather_rows(o, sv.img_pos);
                break;
            }
            case TowerVariant::GatedTower: {
                Tensor<T> full = has_img ? assemble_rows(L, sv.text_pos, xt, sv.img_pos, xi) : xt;
                Tensor<T> o = block_rows(full, full, all_pos, full_mask, L, txt, cfg.heads);
                xt = gather_rows(o, sv.text_pos);
                if (has_img) {
                    const auto gate = block_refs(ctx, lname + ".gate");
                    Tensor<T> gate_out = block_rows(full, gather_rows(full, sv.img_pos), sv.img_pos,
                                                    full_mask, L, gate, cfg.heads);
                    xi = add(gather_rows(o, sv.img_pos), scale_by(gate_out, ctx(lname + ".gamma")));
                }
                break;
            }
            case TowerVariant::DualProjection: {
                const auto img = block_refs(ctx, lname + ".img");
                Tensor<T> nt_ = rmsnorm(xt, txt.norm1);
                Tensor<T> qf, kf, vf;
                if (has_img) {
                    Tensor<T> ni_ = rmsnorm(xi, img.norm1);
                    qf = assemble_rows(L, sv.text_pos, matmul(nt_, txt.wq), sv.img_pos, matmul(ni_, img.wq));
                    kf = assemble_rows(L, sv.text_pos, matmul(nt_, txt.wk), sv.img_pos, matmul(ni_, img.wk));
                    vf = assemble_rows(L, sv.text_pos, matmul(nt_, txt.wv), sv.img_pos, matmul(ni_, img.wv));
                } else {
                    qf = matmul(nt_, txt.wq);
                    kf = matmul(nt_, txt.wk);
                    vf = matmul(nt_, txt.wv);
                }
                Tensor<T> ctx_full = multihead_attention(qf, kf, vf, cfg.heads, full_mask);
                Tensor<T> at = add(xt, matmul(gather_rows(ctx_full, sv.text_pos), txt.wo));
                xt = add(at, swiglu(rmsnorm(at, txt.norm2), txt));
                if (has_img) {
                    Tensor<T> ai = add(xi, matmul(gather_rows(ctx_full, sv.img_pos), img.wo));
                    xi = add(ai, swiglu(rmsnorm(ai, img.norm2), img));
                }
                break;
            }
            case TowerVariant::DualTower: {
                const auto img = has_img || cfg.x_fuse ? block_refs(ctx, lname + ".img") : BlockRefs<T>{};
                Tensor<T> bridged_xi = xi, bridged_xt = xt;
                if (asym) {
                    bridged_xi = matmul(xi, ctx(lname + ".xfuse.p_v2t"));
                    bridged_xt = matmul(xt, ctx(lname + ".xfuse.p_t2v"));
                }
                Tensor<T> in_t = has_img ? assemble_rows(L, sv.text_pos, xt, sv.img_pos, bridged_xi) : xt;
                Tensor<T> in_v;
                if (!asym)
                    in_v = in_t;
                else
                    in_v = has_img ? assemble_rows(L, sv.text_pos, bridged_xt, sv.img_pos, xi) : bridged_xt;

                if (!cfg.x_fuse) {
                    Tensor<T> new_xt = nt > 0 ? block_rows(in_t, xt, sv.text_pos, full_mask, L, txt, cfg.heads) : xt;
                    if (has_img)
                        xi = block_rows(in_v, xi, sv.img_pos, full_mask, L, img, cfg.heads_v);
                    xt = new_xt;
                } else {
                    Tensor<T> t_out = block_rows(in_t, in_t, all_pos, full_mask, L, txt, cfg.heads);
                    Tensor<T> v_out = block_rows(in_v, in_v, all_pos, full_mask, L, img, cfg.heads_v);
                    Tensor<T> txt_from_v = gather_rows(v_out, sv.text_pos);
                    if (asym) txt_from_v = matmul(txt_from_v, ctx(lname + ".xfuse.p_v2t"));
                    Tensor<T> new_xt = add(scale_by(gather_rows(t_out, sv.text_pos), ctx(lname + ".xfuse.alpha_t")),
                                           scale_by(txt_from_v, ctx(lname + ".xfuse.beta_t")));
                    if (has_img) {
                        Tensor<T> img_from_t = gather_rows(t_out, sv.img_pos);
                        if (asym) img_from_t = matmul(img_from_t, ctx(lname + ".xfuse.p_t2v"));
                        xi = add(scale_by(gather_rows(v_out, sv.img_pos), ctx(lname + ".xfuse.alpha_v")),
                                 scale_by(img_from_t, ctx(lname + ".xfuse.beta_v")));
                    }
                    xt = new_xt;
                }
                break;
            }
        }
        out.vision_hidden.push_back(xi);
    }

    out.text_logits =
        add_rowvec(matmul(rmsnorm(xt, ctx("final_norm.txt")), ctx("head.text.w")), ctx("head.text.b"));
    if (has_img)
        out.velocity =
            add_rowvec(matmul(rmsnorm(xi, ctx("final_norm.img")), ctx("head.vel.w")), ctx("head.vel.b"));
    else
        out.velocity = Tensor<T>::zeros({0, cfg.patch_dim});
    return out;
}

// ---------------------------------------------------------------------------
// analytic FLOPs accounting (multiply-accumulate counts)
// ---------------------------------------------------------------------------

struct FlopsReport {
    TowerVariant variant;
    bool x_fuse = false;
    int layers = 0;
    int n_text = 0, n_img = 0, dim = 0, dim_v = 0;
    // per-layer counts
    unsigned long long score_macs = 0;  // QK contractions
    unsigned long long value_macs = 0;  // attention-value contractions
    unsigned long long proj_macs = 0;   // Q/K/V/O projections (plus X-Fuse bridges)
    unsigned long long mlp_macs = 0;

    unsigned long long total_score() const { return score_macs * layers; }
    unsigned long long total_all() const {
        return (score_macs + value_macs + proj_macs + mlp_macs) * layers;
    }
};

FlopsReport count_flops(const ModelConfig& cfg, int n_text, int n_img);

}  // namespace xfusion
