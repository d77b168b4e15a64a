#pragma once

#include "config.hpp"
#include "ntc.hpp"
#include "trainer.hpp"

#include <iomanip>
#include <sstream>
#include <string>

namespace ssdnf {

// Checkpoint container: one NTC file holding codes, decoder, denoiser, every
// Adam state, the weight balancer, the outer counter, and the full run
// configuration as an embedded JSON record.

namespace detail {

inline std::string code_name(size_t i) {
    std::ostringstream os;
    os << "code_raw/" << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

inline void save_adam(NtcFile& f, const std::string& prefix, const AdamState& st) {
    f.add_tensor(prefix + "/m", st.m);
    f.add_tensor(prefix + "/v", st.v);
    f.add_scalar(prefix + "/step", double(st.step));
}

inline void load_adam(const NtcFile& f, const std::string& prefix, AdamState& st, const Shape& shape,
                      double lr) {
    st.m = f.tensor(prefix + "/m");
    st.v = f.tensor(prefix + "/v");
    if (st.m.shape() != shape || st.v.shape() != shape)
        throw ConfigError(strcat_msg("checkpoint: adam state '", prefix, "' has shape ",
                                     shape_str(st.m.shape()), ", expected ", shape_str(shape)));
    st.step = int64_t(f.scalar(prefix + "/step"));
    st.lr = real(lr);
}

} // namespace detail

inline void save_checkpoint(const std::string& path, TrainState& st, const RunConfig& rc) {
    NtcFile f;
    std::string cfg_json = run_config_to_json(rc).dump();
    f.add_u8("meta/config_json", {uint32_t(cfg_json.size())},
             reinterpret_cast<const uint8_t*>(cfg_json.data()));
    f.add_scalar("counters/k_out", double(st.k_out));
    f.add_scalar("balancer/ema_norm", st.balancer.ema_norm);
    f.add_scalar("balancer/ema_initialized", st.balancer.ema_initialized ? 1.0 : 0.0);

    for (size_t i = 0; i < st.codes.size(); ++i) {
        f.add_tensor(detail::code_name(i), st.codes[i].raw);
        detail::save_adam(f, detail::code_name(i) + "/adam", st.code_opt[i]);
    }
    st.decoder.for_each_param([&](const std::string& name, Tensor& t) { f.add_tensor(name, t); });
    st.denoiser.for_each_param([&](const std::string& name, Tensor& t) { f.add_tensor(name, t); });
    for (const auto& [name, adam] : st.decoder_opt.states) detail::save_adam(f, name + "/adam", adam);
    for (const auto& [name, adam] : st.denoiser_opt.states) detail::save_adam(f, name + "/adam", adam);
    f.write(path);
}

struct LoadedCheckpoint {
    RunConfig run;
    TrainState state;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    NtcFile f = NtcFile::read(path);
    const NtcRecord& meta = f.get("meta/config_json");
    std::string cfg_json(reinterpret_cast<const char*>(meta.bytes.data()), meta.bytes.size());
    json root;
    try {
        root = json::parse(cfg_json);
    } catch (const json::exception& e) {
        throw IoError(strcat_msg("checkpoint: embedded config is not valid JSON: ", e.what()));
    }
    LoadedCheckpoint out;
    out.run = parse_run_config(root);
    // count the stored scene codes
    int n_codes = 0;
    while (f.has(detail::code_name(size_t(n_codes)))) ++n_codes;
    if (n_codes == 0) throw IoError("checkpoint: no scene codes found");
    out.state = TrainState::init(out.run.train, n_codes);
    out.state.k_out = int64_t(f.scalar("counters/k_out"));
    out.state.balancer.ema_norm = f.scalar("balancer/ema_norm");
    out.state.balancer.ema_initialized = f.scalar("balancer/ema_initialized") != 0.0;

    Shape code_shape = out.state.codes[0].raw.shape();
    for (int i = 0; i < n_codes; ++i) {
        Tensor raw = f.tensor(detail::code_name(size_t(i)));
        if (raw.shape() != code_shape)
            throw ConfigError(strcat_msg("checkpoint: code ", i, " has shape ", shape_str(raw.shape()),
                                         ", config expects ", shape_str(code_shape)));
        out.state.codes[size_t(i)].raw = raw;
        out.state.codes[size_t(i)].raw.set_requires_grad();
        out.state.codes[size_t(i)].bound_s = out.run.train.bound_s;
        detail::load_adam(f, detail::code_name(size_t(i)) + "/adam", out.state.code_opt[size_t(i)],
                          code_shape, out.run.train.lr_codes);
    }
    out.state.decoder.for_each_param([&](const std::string& name, Tensor& t) {
        Tensor loaded = f.tensor(name);
        if (loaded.shape() != t.shape())
            throw ConfigError(strcat_msg("checkpoint: '", name, "' has shape ", shape_str(loaded.shape()),
                                         ", config expects ", shape_str(t.shape())));
        t = loaded;
        t.set_requires_grad();
        if (f.has(name + "/adam/m")) {
            AdamState st(t.shape(), real(out.run.train.lr_decoder));
            detail::load_adam(f, name + "/adam", st, t.shape(), out.run.train.lr_decoder);
            out.state.decoder_opt.states[name] = std::move(st);
        }
    });
    out.state.denoiser.for_each_param([&](const std::string& name, Tensor& t) {
        Tensor loaded = f.tensor(name);
        if (loaded.shape() != t.shape())
            throw ConfigError(strcat_msg("checkpoint: '", name, "' has shape ", shape_str(loaded.shape()),
                                         ", config expects ", shape_str(t.shape())));
        t = loaded;
        t.set_requires_grad();
        if (f.has(name + "/adam/m")) {
            AdamState st(t.shape(), real(out.run.train.lr_denoiser));
            detail::load_adam(f, name + "/adam", st, t.shape(), out.run.train.lr_denoiser);
            out.state.denoiser_opt.states[name] = std::move(st);
        }
    });
    return out;
}

} // namespace ssdnf
