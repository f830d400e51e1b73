#pragma once

// Run configuration: one flat, sectioned, human-editable text file covering
// every module. Grammar (documented here, normative):
//
//   file     := { line }
//   line     := blank | comment | section | entry
//   comment  := '#' anything
//   section  := '[' name ']'
//   entry    := key '=' value          (whitespace around tokens ignored)
//   value    := integer | float | bool | array | string
//   array    := '[' value { ',' value } ']'     (numeric elements)
//
// Keys are typed by the schema below; unknown sections or keys are rejected
// naming the offender. Serialization is canonical (fixed order, shortest
// round-trip float formatting), so parse -> serialize -> parse is the
// identity on every field.

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsplat/decoder.hpp"
#include "tsplat/encoder.hpp"
#include "tsplat/losses.hpp"
#include "tsplat/optim.hpp"
#include "tsplat/renderer.hpp"

namespace tsplat {

struct TrainingConfig {
    std::size_t total_steps = 2000;
    std::size_t warmup_steps = 100;
    double lr = 5e-4;
    double weight_decay = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    std::uint64_t seed = 1234;
    bool consistency = true;
    bool color_jitter = false;  // accepted but not implemented at desk scale
    std::size_t context_views = 5;
    std::size_t target_views = 4;
    std::size_t window_min = 40;
    std::size_t window_max = 220;
    std::vector<double> stage_starts{0, 100, 200, 500};  // first step of stages 0..3
    std::size_t transition_steps = 20;
    std::size_t eval_every = 100;
    std::size_t checkpoint_every = 500;
    std::size_t synthetic_blobs = 20;
    std::size_t synthetic_frames = 240;
    double synthetic_radius = 2.0;
    double synthetic_arc_degrees = 75.0;
    std::size_t image_size = 64;
    double focal = 64.0;
};

struct IoConfig {
    std::string out_dir = "runs/toy";
    std::string dataset_dir;  // empty -> synthetic scene
};

struct RunConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    RenderConfig renderer;
    LossWeights losses;
    TrainingConfig training;
    IoConfig io;
};

// ---------------------------------------------------------------------------
// Schema. Parser and serializer walk the same field list.

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw std::runtime_error("config: cannot format double");
    return std::string(buf, ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw std::invalid_argument("config: bad number '" + s + "' for key " + key);
    return v;
}

struct ConfigVisitor {
    virtual ~ConfigVisitor() = default;
    virtual void section(const std::string& name) = 0;
    virtual void field(const std::string& key, double& v) = 0;
    virtual void field(const std::string& key, std::size_t& v) = 0;
    virtual void field(const std::string& key, unsigned& v) = 0;
    virtual void field(const std::string& key, int& v) = 0;
    virtual void field(const std::string& key, bool& v) = 0;
    virtual void field_array(const std::string& key, double* data, std::size_t n) = 0;
    virtual void field_vector(const std::string& key, std::vector<double>& v) = 0;
    virtual void field(const std::string& key, std::string& v) = 0;
};

inline void visit_config(RunConfig& c, ConfigVisitor& v) {
    v.section("encoder");
    v.field("latent_tokens", c.encoder.latent_tokens);
    v.field("token_dim", c.encoder.token_dim);
    v.field("blocks", c.encoder.blocks);
    v.field("self_attn_depth", c.encoder.self_attn_depth);
    v.field("heads", c.encoder.heads);
    v.field("rgb_width", c.encoder.rgb_width);
    v.field("ray_width", c.encoder.ray_width);
    v.field("registers", c.encoder.registers);
    v.field("patch_size", c.encoder.patch_size);
    v.field("fourier_frequencies", c.encoder.fourier_frequencies);
    v.field("init_std", c.encoder.init_std);
    v.field("layer_scale_init", c.encoder.layer_scale_init);

    v.section("decoder");
    v.field("candidates_per_token", c.decoder.candidates_per_token);
    v.field("gate_temperature", c.decoder.gate_temperature);
    v.field_array("mean_offset", c.decoder.mean_offset.data(), 3);
    v.field("log_scale_offset", c.decoder.log_scale_offset);
    v.field("opacity_logit_offset", c.decoder.opacity_logit_offset);
    v.field_array("rot6d_offset", c.decoder.rot6d_offset.data(), 6);
    v.field("sh_degree", c.decoder.sh_degree);
    v.field("opacity_clamp_eps", c.decoder.opacity_clamp_eps);

    v.section("renderer");
    v.field("z_near", c.renderer.z_near);
    v.field("dilation", c.renderer.dilation);
    v.field("alpha_clamp", c.renderer.alpha_clamp);
    v.field("alpha_min", c.renderer.alpha_min);
    v.field("power_cutoff", c.renderer.power_cutoff);
    v.field("transmittance_min", c.renderer.transmittance_min);
    v.field_array("background", c.renderer.background.data(), 3);
    v.field("tile_size", c.renderer.tile_size);
    v.field("threads", c.renderer.threads);

    v.section("losses");
    v.field("lambda_mse", c.losses.lambda_mse);
    v.field("lambda_perc", c.losses.lambda_perc);
    v.field("lambda_fru", c.losses.lambda_fru);
    v.field("lambda_dec", c.losses.lambda_dec);
    v.field("lambda_con_alpha", c.losses.lambda_con_alpha);
    v.field("lambda_con_depth", c.losses.lambda_con_depth);
    v.field("alpha_max", c.losses.alpha_max);
    v.field("s_max", c.losses.s_max);
    v.field("c_max", c.losses.c_max);
    v.field("tau_sh", c.losses.tau_sh);
    v.field("sh_power", c.losses.sh_power);
    v.field("frustum_tau", c.losses.frustum_tau);
    v.field("support_threshold", c.losses.support_threshold);
    v.field("dec_inner", c.losses.dec_inner);

    v.section("training");
    v.field("total_steps", c.training.total_steps);
    v.field("warmup_steps", c.training.warmup_steps);
    v.field("lr", c.training.lr);
    v.field("weight_decay", c.training.weight_decay);
    v.field("beta1", c.training.beta1);
    v.field("beta2", c.training.beta2);
    v.field("adam_eps", c.training.adam_eps);
    v.field("clip_norm", c.training.clip_norm);
    v.field("seed", c.training.seed);
    v.field("consistency", c.training.consistency);
    v.field("color_jitter", c.training.color_jitter);
    v.field("context_views", c.training.context_views);
    v.field("target_views", c.training.target_views);
    v.field("window_min", c.training.window_min);
    v.field("window_max", c.training.window_max);
    v.field_vector("stage_starts", c.training.stage_starts);
    v.field("transition_steps", c.training.transition_steps);
    v.field("eval_every", c.training.eval_every);
    v.field("checkpoint_every", c.training.checkpoint_every);
    v.field("synthetic_blobs", c.training.synthetic_blobs);
    v.field("synthetic_frames", c.training.synthetic_frames);
    v.field("synthetic_radius", c.training.synthetic_radius);
    v.field("synthetic_arc_degrees", c.training.synthetic_arc_degrees);
    v.field("image_size", c.training.image_size);
    v.field("focal", c.training.focal);

    v.section("io");
    v.field("out_dir", c.io.out_dir);
    v.field("dataset_dir", c.io.dataset_dir);
}

struct Serializer final : ConfigVisitor {
    std::ostringstream os;
    bool first = true;

    void section(const std::string& name) override {
        if (!first) os << "\n";
        first = false;
        os << "[" << name << "]\n";
    }
    void field(const std::string& key, double& v) override {
        os << key << " = " << format_double(v) << "\n";
    }
    void field(const std::string& key, std::size_t& v) override { os << key << " = " << v << "\n"; }
    void field(const std::string& key, unsigned& v) override { os << key << " = " << v << "\n"; }
    void field(const std::string& key, int& v) override { os << key << " = " << v << "\n"; }
    void field(const std::string& key, bool& v) override {
        os << key << " = " << (v ? "true" : "false") << "\n";
    }
    void field_array(const std::string& key, double* data, std::size_t n) override {
        os << key << " = [";
        for (std::size_t i = 0; i < n; ++i) os << (i ? ", " : "") << format_double(data[i]);
        os << "]\n";
    }
    void field_vector(const std::string& key, std::vector<double>& v) override {
        field_array(key, v.data(), v.size());
    }
    void field(const std::string& key, std::string& v) override { os << key << " = " << v << "\n"; }
};

struct Parser final : ConfigVisitor {
    std::map<std::string, std::string> values;  // "section.key" -> raw
    std::string current;

    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    void load(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        std::string section_name;
        while (std::getline(is, line)) {
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw std::invalid_argument("config: malformed section header '" + t + "'");
                section_name = trim(t.substr(1, t.size() - 2));
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: expected 'key = value', got '" + t + "'");
            const std::string key = trim(t.substr(0, eq));
            if (section_name.empty())
                throw std::invalid_argument("config: key '" + key + "' outside any section");
            values[section_name + "." + key] = trim(t.substr(eq + 1));
        }
    }

    void section(const std::string& name) override { current = name; }

    bool take(const std::string& key, std::string& out) {
        auto it = values.find(current + "." + key);
        if (it == values.end()) return false;
        out = it->second;
        values.erase(it);
        return true;
    }

    void field(const std::string& key, double& v) override {
        std::string raw;
        if (take(key, raw)) v = parse_double(raw, current + "." + key);
    }
    void field(const std::string& key, std::size_t& v) override {
        std::string raw;
        if (take(key, raw)) v = static_cast<std::size_t>(parse_double(raw, current + "." + key));
    }
    void field(const std::string& key, unsigned& v) override {
        std::string raw;
        if (take(key, raw)) v = static_cast<unsigned>(parse_double(raw, current + "." + key));
    }
    void field(const std::string& key, int& v) override {
        std::string raw;
        if (take(key, raw)) v = static_cast<int>(parse_double(raw, current + "." + key));
    }
    void field(const std::string& key, bool& v) override {
        std::string raw;
        if (!take(key, raw)) return;
        if (raw == "true")
            v = true;
        else if (raw == "false")
            v = false;
        else
            throw std::invalid_argument("config: bad bool '" + raw + "' for key " + current + "." +
                                        key);
    }
    std::vector<double> parse_array(const std::string& raw, const std::string& key) {
        if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']')
            throw std::invalid_argument("config: bad array for key " + key);
        std::vector<double> out;
        std::string body = raw.substr(1, raw.size() - 2);
        std::istringstream is(body);
        std::string item;
        while (std::getline(is, item, ',')) out.push_back(parse_double(trim(item), key));
        return out;
    }
    void field_array(const std::string& key, double* data, std::size_t n) override {
        std::string raw;
        if (!take(key, raw)) return;
        std::vector<double> vals = parse_array(raw, current + "." + key);
        if (vals.size() != n)
            throw std::invalid_argument("config: key " + current + "." + key + " expects " +
                                        std::to_string(n) + " values");
        std::copy(vals.begin(), vals.end(), data);
    }
    void field_vector(const std::string& key, std::vector<double>& v) override {
        std::string raw;
        if (take(key, raw)) v = parse_array(raw, current + "." + key);
    }
    void field(const std::string& key, std::string& v) override {
        std::string raw;
        if (take(key, raw)) v = raw;
    }
};

}  // namespace detail

inline std::string serialize_config(const RunConfig& config) {
    detail::Serializer s;
    RunConfig copy = config;
    detail::visit_config(copy, s);
    return s.os.str();
}

inline RunConfig parse_config(const std::string& text) {
    detail::Parser p;
    p.load(text);
    RunConfig config;
    detail::visit_config(config, p);
    if (!p.values.empty())
        throw std::invalid_argument("config: unknown key '" + p.values.begin()->first + "'");
    return config;
}

// FNV-1a over the canonical serialized form; stored in checkpoints.
inline std::uint64_t config_hash(const RunConfig& config) {
    const std::string text = serialize_config(config);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Paper-scale preset: the configuration the full model would use; the
// default RunConfig is the desk-scale toy setup.
inline RunConfig paper_scale_config() {
    RunConfig c;
    c.encoder.latent_tokens = 2048;
    c.encoder.token_dim = 512;
    c.encoder.blocks = 4;
    c.encoder.self_attn_depth = 2;
    c.encoder.heads = 8;
    c.encoder.rgb_width = 512;
    c.encoder.ray_width = 256;
    c.training.total_steps = 220000;
    c.training.warmup_steps = 2000;
    c.training.context_views = 13;
    c.training.target_views = 12;
    c.training.stage_starts = {0, 10000, 20000, 50000};
    c.training.transition_steps = 2000;
    c.training.image_size = 256;
    c.training.focal = 256.0;
    return c;
}

}  // namespace tsplat
