#pragma once

// Multi-instance sampling: every instance gets its own denoising branch for
// the first round(alpha*S) DDIM steps, the branches are fused into the
// global image under the instance masks, and a single global chain finishes
// the remaining steps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mtcolor/config.hpp"
#include "mtcolor/diffusion.hpp"
#include "mtcolor/mask_algebra.hpp"
#include "mtcolor/text_encoder.hpp"

namespace mtcolor {

struct ColorizeRequest {
    std::vector<float> gray; // H*W in [0,1]
    std::string global_text;
    MaskSet masks{0, 0};
    std::vector<std::string> texts; // one per mask
    SamplerConfig sampler;
};

template <typename T>
struct InstancePhaseState {
    std::vector<T> z_g;
    std::vector<std::vector<T>> z_i;
    int t_star = 0;      // DDIM steps still to run after the instance phase
    int timestep = 0;    // diffusion timestep the state sits at
    int phase_steps = 0; // steps taken by each branch
};

inline int instance_phase_steps(const SamplerConfig& sc) {
    return static_cast<int>(std::lround(sc.alpha * sc.ddim_steps));
}

template <typename T>
std::vector<std::vector<T>> init_instance_noises(const std::vector<T>& z_T, int n) {
    if (n < 0) throw InvalidArgument("instance count must be >= 0");
    return std::vector<std::vector<T>>(static_cast<std::size_t>(n), z_T);
}

// Conditions seen by the global chain: full mask and text sets.
inline Conditioning global_conditioning(const ColorizeRequest& r) {
    Conditioning c;
    c.gray = r.gray;
    c.global_text = r.global_text;
    c.masks = r.masks;
    c.texts = r.texts;
    return c;
}

// Branch i sees only its own mask and text; its text doubles as global text.
inline Conditioning instance_conditioning(const ColorizeRequest& r, std::size_t i) {
    Conditioning c;
    c.gray = r.gray;
    c.global_text = r.texts.at(i);
    c.masks = MaskSet(r.masks.width(), r.masks.height());
    c.masks.push_back(r.masks[i]);
    c.texts = {r.texts[i]};
    return c;
}

namespace detail {

inline constexpr std::uint64_t kGlobalStream = 0x9e3779b97f4a7c15ull;

// eta > 0 noise stream: the global chain uses the plain sampler's stream,
// branch i a stream keyed by its index so scheduling order cannot matter.
inline std::uint64_t branch_stream(std::uint64_t seed, int branch) {
    if (branch < 0) return seed ^ kGlobalStream;
    return fnv1a64("branch:" + std::to_string(branch), seed ^ kGlobalStream);
}

template <typename T>
void run_chain(const Denoiser<T>& model, std::vector<T>& z, const Conditioning& c, const NoiseSchedule& s,
               const SamplerConfig& sc, const ForwardOptions& opt, const std::vector<int>& ts, std::size_t k0,
               std::size_t k1, std::mt19937_64& rng, const char* phase, int branch, const StepHook& hook) {
    for (std::size_t k = k0; k < k1; ++k) {
        auto eps = guided_eps(model, z, ts[k], c, sc.guidance, opt);
        z = ddim_step<T>(z, eps, ts[k], ts[k + 1], s, sc.eta, &rng, sc.clip_x0);
        if (hook) hook(phase, branch, ts[k], ts[k + 1]);
    }
}

} // namespace detail

inline void validate_request(const ColorizeRequest& r, int image_size) {
    const auto px = static_cast<std::size_t>(image_size) * image_size;
    if (r.gray.size() != px)
        throw DimensionMismatch("gray has " + std::to_string(r.gray.size()) + " pixels, model expects " +
                                std::to_string(image_size) + "x" + std::to_string(image_size));
    for (float g : r.gray)
        if (!(g >= 0.0f && g <= 1.0f)) throw InvalidInput("gray values must lie in [0,1]");
    if (r.texts.size() != r.masks.size())
        throw DimensionMismatch(std::to_string(r.texts.size()) + " instance texts for " +
                                std::to_string(r.masks.size()) + " masks");
    if (!r.masks.empty() && (r.masks.width() != image_size || r.masks.height() != image_size))
        throw DimensionMismatch("instance masks must be " + std::to_string(image_size) + "x" +
                                std::to_string(image_size));
    for (std::size_t i = 0; i < r.masks.size(); ++i)
        if (!r.masks[i].any()) throw InvalidInput("instance " + std::to_string(i) + " has an empty mask");
}

// Runs the global branch and every instance branch for round(alpha*S) steps.
// Hook is invoked from worker threads when sc.threads > 1.
template <typename T>
InstancePhaseState<T> run_instance_phase(InstancePhaseState<T> state, const Denoiser<T>& model,
                                         const ColorizeRequest& req, const NoiseSchedule& s,
                                         const ForwardOptions& opt = {}, const StepHook& hook = {}) {
    const auto& sc = req.sampler;
    const int k = instance_phase_steps(sc);
    const auto ts = ddim_timesteps(s.T, sc.ddim_steps);
    state.phase_steps = k;
    state.t_star = sc.ddim_steps - k;
    state.timestep = ts[static_cast<std::size_t>(k)];
    if (k == 0) return state;

    const int n = static_cast<int>(state.z_i.size());
    if (n != static_cast<int>(req.masks.size()))
        throw DimensionMismatch("instance state count does not match the request");

    // Branch -1 is global.
    auto run = [&](int branch) {
        std::mt19937_64 rng(detail::branch_stream(sc.seed, branch));
        if (branch < 0) {
            detail::run_chain(model, state.z_g, global_conditioning(req), s, sc, opt, ts, 0, k, rng, "instance",
                              -1, hook);
        } else {
            detail::run_chain(model, state.z_i[branch], instance_conditioning(req, branch), s, sc, opt, ts, 0, k,
                              rng, "instance", branch, hook);
        }
    };

    if (sc.threads <= 1) {
        for (int b = -1; b < n; ++b) run(b);
        return state;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n) + 1);
    const int workers = std::min(sc.threads, n + 1);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int b = w - 1; b < n; b += workers) {
                try {
                    run(b);
                } catch (...) {
                    errors[b + 1] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return state;
}

// literal: z = beta * m_g * z_g + sum_i m_i * z_i
// convex:  m_g * z_g + sum_i m_i * (beta * z_g + (1 - beta) * z_i)
template <typename T>
std::vector<T> fuse(const std::vector<T>& z_g, const std::vector<std::vector<T>>& z_list, const MaskSet& masks,
                    double beta, FuseMode mode = FuseMode::literal) {
    if (z_list.size() != masks.size())
        throw DimensionMismatch(std::to_string(z_list.size()) + " instance images for " +
                                std::to_string(masks.size()) + " masks");
    const std::size_t px = static_cast<std::size_t>(masks.pixels());
    if (px == 0 || z_g.size() % px != 0)
        throw DimensionMismatch("image size is not a multiple of the mask grid");
    for (const auto& z : z_list) check_same_size<T>(z_g, z, "fuse");
    const std::size_t channels = z_g.size() / px;
    const auto m_g = background_mask(masks);
    const T b = static_cast<T>(beta);
    const T nb = static_cast<T>(1.0 - beta);

    std::vector<T> out(z_g.size(), T(0));
    for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t off = ch * px;
        for (std::size_t p = 0; p < px; ++p) {
            const int i = static_cast<int>(p);
            // First term assigned rather than added to 0 so signed zeros survive.
            T v = T(0);
            bool any = false;
            if (m_g[i]) {
                v = mode == FuseMode::literal ? b * z_g[off + p] : z_g[off + p];
                any = true;
            }
            for (std::size_t k = 0; k < masks.size(); ++k) {
                if (!masks[k][i]) continue;
                const T term = mode == FuseMode::literal ? z_list[k][off + p] : b * z_g[off + p] + nb * z_list[k][off + p];
                v = any ? v + term : term;
                any = true;
            }
            out[off + p] = v;
        }
    }
    return out;
}

template <typename T>
std::vector<T> run_global_phase(std::vector<T> z, int t_star, const Denoiser<T>& model, const ColorizeRequest& req,
                                const NoiseSchedule& s, const ForwardOptions& opt = {}, const StepHook& hook = {}) {
    const auto& sc = req.sampler;
    const auto ts = ddim_timesteps(s.T, sc.ddim_steps);
    if (t_star < 0 || t_star > sc.ddim_steps) throw InvalidArgument("t_star outside [0,S]");
    // Continues the global stream; after an instance phase it restarts from
    // a stream offset so eta > 0 draws never repeat.
    const int k0 = sc.ddim_steps - t_star;
    std::mt19937_64 rng(k0 == 0 ? detail::branch_stream(sc.seed, -1)
                                : fnv1a64("global-phase", sc.seed ^ detail::kGlobalStream));
    detail::run_chain(model, z, global_conditioning(req), s, sc, opt, ts, static_cast<std::size_t>(k0),
                      static_cast<std::size_t>(sc.ddim_steps), rng, "global", -1, hook);
    return z;
}

// BT.601 luma.
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

// Replace the luma of an RGB pixel by y, keeping chroma direction and
// shrinking it only as far as needed to stay inside [0,1]^3.
inline void lock_luma(double& r, double& g, double& b, double y) {
    const double y0 = luma(r, g, b);
    double c[3] = {r - y0, g - y0, b - y0};
    double s = 1.0;
    for (double d : c) {
        if (y + s * d > 1.0) s = std::min(s, (1.0 - y) / d);
        if (y + s * d < 0.0) s = std::min(s, -y / d);
    }
    s = std::max(s, 0.0);
    r = std::clamp(y + s * c[0], 0.0, 1.0);
    g = std::clamp(y + s * c[1], 0.0, 1.0);
    b = std::clamp(y + s * c[2], 0.0, 1.0);
}

struct ColorizeResult {
    std::vector<float> rgb; // [3,H,W] in [0,1]
    nlohmann::json provenance;
};

// Full pipeline: seeded noise, instance phase, fusion, global phase, clamp,
// optional luma lock, then 8-bit-safe [0,1] output.
template <typename T>
ColorizeResult colorize(const ColorizeRequest& req, const Denoiser<T>& model, const NoiseSchedule& s,
                        const ForwardOptions& opt = {}, const StepHook& hook = {}) {
    const auto& sc = req.sampler;
    sc.validate(s.T);
    const int size = model.config().image_size;
    validate_request(req, size);

    const std::size_t n_px = static_cast<std::size_t>(size) * size;
    auto z_T = initial_noise<T>(static_cast<std::size_t>(model.config().channels) * n_px, sc.seed);
    InstancePhaseState<T> st;
    st.z_g = z_T;
    st.z_i = init_instance_noises(z_T, static_cast<int>(req.masks.size()));
    st = run_instance_phase(std::move(st), model, req, s, opt, hook);

    std::vector<T> z = std::move(st.z_g);
    const bool fused = st.phase_steps > 0 && !req.masks.empty();
    if (fused) {
        const MaskSet fm = sc.fuse_first_match ? first_match_disjoint(req.masks) : req.masks;
        z = fuse(z, st.z_i, fm, sc.beta, sc.fuse_mode);
    }
    z = run_global_phase(std::move(z), st.t_star, model, req, s, opt, hook);

    ColorizeResult out;
    out.rgb.resize(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        out.rgb[i] = static_cast<float>(std::clamp((static_cast<double>(z[i]) + 1.0) * 0.5, 0.0, 1.0));
    if (sc.luma_lock) {
        for (std::size_t p = 0; p < n_px; ++p) {
            double r = out.rgb[p], g = out.rgb[n_px + p], b = out.rgb[2 * n_px + p];
            lock_luma(r, g, b, req.gray[p]);
            out.rgb[p] = static_cast<float>(r);
            out.rgb[n_px + p] = static_cast<float>(g);
            out.rgb[2 * n_px + p] = static_cast<float>(b);
        }
    }

    auto cfg = to_json(sc);
    out.provenance = {{"seed", sc.seed},
                      {"sampler", cfg},
                      {"config_hash", hex64(fnv1a64(cfg.dump()))},
                      {"alpha", sc.alpha},
                      {"beta", sc.beta},
                      {"instances", req.masks.size()},
                      {"steps", {{"instance", st.phase_steps}, {"global", st.t_star}, {"total", sc.ddim_steps}}},
                      {"t_star", st.t_star},
                      {"fusion_timestep", st.timestep},
                      {"fused", fused},
                      {"masks_enabled", opt.masks_enabled},
                      {"guidance_enabled", opt.guidance_enabled}};
    return out;
}

} // namespace mtcolor
