#include "occmesh/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace occmesh::harness {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(key, trim(item)));
    return out;
}

std::string join(const double* v, std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) s += ",";
        s += fmt(v[i]);
    }
    return s;
}

template <std::size_t N, class T>
void parse_array(const std::string& key, const std::string& v, std::array<T, N>& out) {
    const auto list = parse_list(key, v);
    if (list.size() != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated values");
    for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(list[i]);
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        auto idx = [](Index RunConfig::*field) {
            return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_int(k, v); };
        };
        t["data.train"] = [](RunConfig& c, const std::string&, const std::string& v) { c.train_data = v; };
        t["data.test"] = [](RunConfig& c, const std::string&, const std::string& v) { c.test_data = v; };
        t["train.epochs"] = idx(&RunConfig::epochs);
        t["train.batch"] = idx(&RunConfig::batch);
        t["train.eval_every"] = idx(&RunConfig::eval_every);
        t["train.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); };
        t["optim.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.lr = parse_double(k, v); };
        t["optim.weight_decay"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.optim.weight_decay = parse_double(k, v);
        };
        t["optim.beta1"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.beta1 = parse_double(k, v); };
        t["optim.beta2"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.beta2 = parse_double(k, v); };
        t["optim.eps"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.optim.eps = parse_double(k, v); };
        t["optim.decay_epoch"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.optim.decay_epoch = parse_int(k, v);
        };
        t["optim.decay_factor"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.optim.decay_factor = parse_double(k, v);
        };
        t["loss.joints3d"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.joints3d = parse_double(k, v); };
        t["loss.joints2d"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.joints2d = parse_double(k, v); };
        t["loss.velocity"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.velocity = parse_double(k, v); };
        t["loss.vertices"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.weights.vertices = parse_double(k, v); };
        t["loss.speed_norm"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "frames") {
                c.velocity.normalization = losses::SpeedNormalization::JointsTimesFrames;
            } else if (v == "gaps") {
                c.velocity.normalization = losses::SpeedNormalization::JointsTimesGaps;
            } else {
                throw ConfigError(k + ": expected frames or gaps, got '" + v + "'");
            }
        };
        t["loss.velocity_source"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "joints") {
                c.velocity.source = losses::VelocitySource::Joints;
            } else if (v == "vertices") {
                c.velocity.source = losses::VelocitySource::Vertices;
            } else {
                throw ConfigError(k + ": expected joints or vertices, got '" + v + "'");
            }
        };
        t["ablation.sd"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.sd_enabled = parse_bool(k, v); };
        t["ablation.md"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.md_enabled = parse_bool(k, v); };
        t["ablation.velocity"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.velocity_enabled = parse_bool(k, v);
        };
        auto midx = [](Index model::ModelConfig::*field) {
            return [field](RunConfig& c, const std::string& k, const std::string& v) { c.model.*field = parse_int(k, v); };
        };
        t["model.image_size"] = midx(&model::ModelConfig::image_size);
        t["model.image_channels"] = midx(&model::ModelConfig::image_channels);
        t["model.feature_channels"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.feature_channels = parse_int(k, v);
            c.model.sd.channels = c.model.feature_channels;
        };
        t["model.joints"] = midx(&model::ModelConfig::joints);
        t["model.vertices"] = midx(&model::ModelConfig::vertices);
        t["model.layers"] = midx(&model::ModelConfig::layers);
        t["model.heads"] = midx(&model::ModelConfig::heads);
        t["model.model_dim"] = midx(&model::ModelConfig::model_dim);
        t["model.ffn_mult"] = midx(&model::ModelConfig::ffn_mult);
        t["model.backbone_channels"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            parse_array(k, v, c.model.backbone_channels);
        };
        t["model.output_scale"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.output_scale = parse_double(k, v);
        };
        t["model.zero_init_heads"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.zero_init_heads = parse_bool(k, v);
        };
        t["model.order"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            if (v == "sequential") {
                c.model.order = model::BlockOrder::Sequential;
            } else if (v == "parallel") {
                c.model.order = model::BlockOrder::Parallel;
            } else {
                throw ConfigError(k + ": expected sequential or parallel, got '" + v + "'");
            }
        };
        t["model.camera_prior"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            parse_array(k, v, c.model.camera_prior);
        };
        t["model.camera_scale"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            parse_array(k, v, c.model.camera_scale);
        };
        t["model.rest_template"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.rest_template = parse_bool(k, v);
        };
        t["model.template"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.template_points = v.empty() ? std::vector<double>{} : parse_list(k, v);
        };
        t["model.groups"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.sd.groups = parse_int(k, v); };
        t["sd.groups"] = t["model.groups"];
        t["sd.norm_groups"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.sd.norm_groups = parse_int(k, v);
        };
        t["sd.share_params"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.sd.share_params = parse_bool(k, v);
        };
        t["md.groups"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.md.groups = parse_int(k, v); };
        t["md.frames"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.md.frames = parse_int(k, v); };
        t["md.shuffle"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.md.shuffle = parse_bool(k, v); };
        return t;
    }();
    return table;
}

}  // namespace

losses::LossWeights RunConfig::effective_weights() const {
    losses::LossWeights w = weights;
    if (!velocity_enabled) w.velocity = 0.0;
    return w;
}

void RunConfig::finalize(Index frames) {
    model.sd.channels = model.feature_channels;
    model.md.frames = frames;
    validate();
}

void RunConfig::validate() const {
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
    if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
        throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
    }
    if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be positive");
    if (!(optim.decay_factor > 0.0)) throw ConfigError("optim.decay_factor must be positive");
    if (epochs < 1) throw ConfigError("train.epochs must be positive");
    if (batch < 1) throw ConfigError("train.batch must be at least 1");
    if (eval_every < 0) throw ConfigError("train.eval_every must be non-negative");
    try {
        weights.validate();
        model.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
    const auto& table = setters();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, key, value);
}

RunConfig parse_config(const std::string& text, RunConfig base) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        try {
            apply_setting(base, key, trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string to_text(const RunConfig& c) {
    const auto& m = c.model;
    std::ostringstream o;
    auto b = [](bool v) { return v ? "true" : "false"; };
    o << "data.train = " << c.train_data << "\n";
    o << "data.test = " << c.test_data << "\n";
    o << "train.epochs = " << c.epochs << "\n";
    o << "train.batch = " << c.batch << "\n";
    o << "train.seed = " << c.seed << "\n";
    o << "train.eval_every = " << c.eval_every << "\n";
    o << "optim.lr = " << fmt(c.optim.lr) << "\n";
    o << "optim.weight_decay = " << fmt(c.optim.weight_decay) << "\n";
    o << "optim.beta1 = " << fmt(c.optim.beta1) << "\n";
    o << "optim.beta2 = " << fmt(c.optim.beta2) << "\n";
    o << "optim.eps = " << fmt(c.optim.eps) << "\n";
    o << "optim.decay_epoch = " << c.optim.decay_epoch << "\n";
    o << "optim.decay_factor = " << fmt(c.optim.decay_factor) << "\n";
    o << "loss.joints3d = " << fmt(c.weights.joints3d) << "\n";
    o << "loss.joints2d = " << fmt(c.weights.joints2d) << "\n";
    o << "loss.velocity = " << fmt(c.weights.velocity) << "\n";
    o << "loss.vertices = " << fmt(c.weights.vertices) << "\n";
    o << "loss.speed_norm = "
      << (c.velocity.normalization == losses::SpeedNormalization::JointsTimesFrames ? "frames" : "gaps") << "\n";
    o << "loss.velocity_source = " << (c.velocity.source == losses::VelocitySource::Joints ? "joints" : "vertices")
      << "\n";
    o << "ablation.sd = " << b(m.sd_enabled) << "\n";
    o << "ablation.md = " << b(m.md_enabled) << "\n";
    o << "ablation.velocity = " << b(c.velocity_enabled) << "\n";
    o << "model.image_size = " << m.image_size << "\n";
    o << "model.image_channels = " << m.image_channels << "\n";
    o << "model.backbone_channels = " << m.backbone_channels[0] << "," << m.backbone_channels[1] << "\n";
    o << "model.feature_channels = " << m.feature_channels << "\n";
    o << "model.joints = " << m.joints << "\n";
    o << "model.vertices = " << m.vertices << "\n";
    o << "model.layers = " << m.layers << "\n";
    o << "model.heads = " << m.heads << "\n";
    o << "model.model_dim = " << m.model_dim << "\n";
    o << "model.ffn_mult = " << m.ffn_mult << "\n";
    o << "model.order = " << (m.order == model::BlockOrder::Sequential ? "sequential" : "parallel") << "\n";
    o << "model.output_scale = " << fmt(m.output_scale) << "\n";
    o << "model.zero_init_heads = " << b(m.zero_init_heads) << "\n";
    o << "model.camera_prior = " << join(m.camera_prior.data(), 3) << "\n";
    o << "model.camera_scale = " << join(m.camera_scale.data(), 3) << "\n";
    o << "model.rest_template = " << b(c.rest_template) << "\n";
    o << "model.template = " << join(m.template_points.data(), m.template_points.size()) << "\n";
    o << "sd.groups = " << m.sd.groups << "\n";
    o << "sd.norm_groups = " << m.sd.norm_groups << "\n";
    o << "sd.share_params = " << b(m.sd.share_params) << "\n";
    o << "md.frames = " << m.md.frames << "\n";
    o << "md.groups = " << m.md.groups << "\n";
    o << "md.shuffle = " << b(m.md.shuffle) << "\n";
    return o.str();
}

void apply_ablation(RunConfig& config, const std::string& spec) {
    bool sd = false, md = false, vel = false;
    if (spec != "none") {
        std::stringstream ss(spec);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item == "sd") {
                sd = true;
            } else if (item == "md") {
                md = true;
            } else if (item == "vel") {
                vel = true;
            } else {
                throw ConfigError("--ablation: unknown component '" + item + "' (expected sd, md, vel or none)");
            }
        }
    }
    config.model.sd_enabled = sd;
    config.model.md_enabled = md;
    config.velocity_enabled = vel;
}

}  // namespace occmesh::harness
