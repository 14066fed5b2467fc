// SPDX-License-Identifier: Apache-2.0
#include "xmoe.h"

#include <exception>
#include <sstream>
#include <string>
#include <vector>

#include "xmoe/engine.hpp"

struct xmoe_engine {
    xmoe::RunConfig cfg;
    std::string last_error;
};

namespace {

int code_for(xmoe::ErrorKind kind) {
    switch (kind) {
        case xmoe::ErrorKind::config:
            return XMOE_E_CONFIG;
        case xmoe::ErrorKind::check:
            return XMOE_E_CHECK;
        case xmoe::ErrorKind::runtime:
        default:
            return XMOE_E_RUNTIME;
    }
}

// runs a command body, translating exceptions into status codes
template <typename Fn>
int guarded(xmoe_engine* eng, Fn&& fn) {
    if (!eng) return XMOE_E_RUNTIME;
    eng->last_error.clear();
    try {
        fn();
        return XMOE_OK;
    } catch (const xmoe::Error& e) {
        eng->last_error = e.what();
        return code_for(e.kind());
    } catch (const std::exception& e) {
        eng->last_error = e.what();
        return XMOE_E_RUNTIME;
    } catch (...) {
        eng->last_error = "unknown error";
        return XMOE_E_RUNTIME;
    }
}

xmoe::RunConfig finalized(const xmoe::RunConfig& cfg) {
    xmoe::RunConfig out = cfg;
    out.finalize();
    return out;
}

}  // namespace

extern "C" {

xmoe_engine* xmoe_engine_new(void) {
    try {
        return new xmoe_engine();
    } catch (...) {
        return nullptr;
    }
}

void xmoe_engine_free(xmoe_engine* eng) {
    delete eng;
}

const char* xmoe_last_error(const xmoe_engine* eng) {
    return eng ? eng->last_error.c_str() : "null engine";
}

const char* xmoe_version(void) {
    return xmoe::kEngineVersion;
}

int xmoe_load_config(xmoe_engine* eng, const char* path) {
    return guarded(eng, [&] {
        if (!path) throw xmoe::Error::config("null config path");
        xmoe::RunConfig parsed = xmoe::parse_config_file(path);
        eng->cfg = std::move(parsed);
    });
}

int xmoe_set_option(xmoe_engine* eng, const char* dotted_key, const char* value) {
    return guarded(eng, [&] {
        if (!dotted_key || !value) throw xmoe::Error::config("null option key or value");
        xmoe::apply_override(eng->cfg, dotted_key, value);
    });
}

int xmoe_gen_data(xmoe_engine* eng, const char* out_dir) {
    return guarded(eng, [&] {
        if (!out_dir) throw xmoe::Error::config("null output directory");
        xmoe::cmd_gen_data(finalized(eng->cfg), out_dir);
    });
}

int xmoe_pretrain(xmoe_engine* eng, const char* out_dir) {
    return guarded(eng, [&] {
        if (!out_dir) throw xmoe::Error::config("null output directory");
        xmoe::cmd_pretrain(finalized(eng->cfg), out_dir);
    });
}

int xmoe_finetune(xmoe_engine* eng, const char* checkpoint_path, const char* out_dir) {
    return guarded(eng, [&] {
        if (!checkpoint_path || !out_dir) {
            throw xmoe::Error::config("null checkpoint path or output directory");
        }
        xmoe::cmd_finetune(finalized(eng->cfg), checkpoint_path, out_dir);
    });
}

int xmoe_analyze(xmoe_engine* eng, const char* kind, const char* const* inputs, size_t n_inputs,
                 const char* out_dir) {
    return guarded(eng, [&] {
        if (!kind || !out_dir) throw xmoe::Error::config("null analysis kind or output dir");
        std::vector<std::string> in;
        for (size_t i = 0; i < n_inputs; ++i) {
            if (!inputs || !inputs[i]) throw xmoe::Error::config("null analysis input");
            in.emplace_back(inputs[i]);
        }
        xmoe::cmd_analyze(finalized(eng->cfg), kind, in, out_dir);
    });
}

int xmoe_ablate(xmoe_engine* eng, const char* axis, const char* values_csv,
                const char* out_dir) {
    return guarded(eng, [&] {
        if (!axis || !values_csv || !out_dir) {
            throw xmoe::Error::config("null ablation axis, values or output dir");
        }
        std::vector<std::string> values;
        std::istringstream vs(values_csv);
        std::string v;
        while (std::getline(vs, v, ',')) {
            if (!v.empty()) values.push_back(v);
        }
        xmoe::cmd_ablate(finalized(eng->cfg), axis, values, out_dir);
    });
}

}  // extern "C"
