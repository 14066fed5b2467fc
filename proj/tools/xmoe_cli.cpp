// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Links only the public C API; all engine state and
// computation live behind the shared library.
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xmoe.h"

namespace {

struct EngineHandle {
    xmoe_engine* eng = nullptr;
    EngineHandle() : eng(xmoe_engine_new()) {}
    ~EngineHandle() { xmoe_engine_free(eng); }
    EngineHandle(const EngineHandle&) = delete;
    EngineHandle& operator=(const EngineHandle&) = delete;
};

int fail(xmoe_engine* eng, int code) {
    std::fprintf(stderr, "error: %s\n", xmoe_last_error(eng));
    return code;
}

int apply_common(xmoe_engine* eng, const std::string& config_path,
                 const std::vector<std::string>& sets) {
    if (!config_path.empty()) {
        if (int rc = xmoe_load_config(eng, config_path.c_str()); rc != XMOE_OK) {
            return rc;
        }
    }
    for (const std::string& kv : sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            return XMOE_E_CONFIG;
        }
        if (int rc = xmoe_set_option(eng, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
            rc != XMOE_OK) {
            return rc;
        }
    }
    return XMOE_OK;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse mixture-of-experts training and routing analysis"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("-c,--config", config_path, "INI configuration file")
        ->check(CLI::ExistingFile);
    app.add_option("--set", sets, "override a config key, e.g. --set train.steps=500");

    std::string out_dir = "out";

    CLI::App* gen = app.add_subcommand("gen-data", "generate or import a token corpus");
    gen->add_option("-o,--out", out_dir, "output directory");

    CLI::App* pre = app.add_subcommand("pretrain", "masked-token pre-training run");
    pre->add_option("-o,--out", out_dir, "output directory");

    std::string checkpoint;
    CLI::App* fine = app.add_subcommand("finetune", "fine-tune from a checkpoint "
                                                    "(routing frozen by default)");
    fine->add_option("--checkpoint", checkpoint, "pretrained checkpoint file")->required();
    fine->add_option("-o,--out", out_dir, "output directory");

    std::string kind;
    std::vector<std::string> inputs;
    CLI::App* ana = app.add_subcommand("analyze", "routing and collapse diagnostics");
    ana->add_option("kind", kind, "rc | rf | ic | jacobian | span | export")->required();
    ana->add_option("-i,--inputs", inputs,
                    "checkpoints (rc/rf/span/export) or train_log.csv files (ic)");
    ana->add_option("-o,--out", out_dir, "output directory");

    std::string axis;
    std::string values;
    CLI::App* abl = app.add_subcommand("ablate", "sweep one axis, one full run per value");
    abl->add_option("axis", axis, "routing_dim | alpha | variant | gating | components")
        ->required();
    abl->add_option("--values", values, "comma-separated values, e.g. N/4,N/2,N,2N,4N")
        ->required();
    abl->add_option("-o,--out", out_dir, "output directory");

    for (CLI::App* sub : {gen, pre, fine, ana, abl}) {
        sub->fallthrough();  // let -c/--set appear after the subcommand
    }

    CLI11_PARSE(app, argc, argv);

    EngineHandle handle;
    if (!handle.eng) {
        std::fprintf(stderr, "error: could not create engine\n");
        return XMOE_E_RUNTIME;
    }
    xmoe_engine* eng = handle.eng;

    if (int rc = apply_common(eng, config_path, sets); rc != XMOE_OK) {
        return fail(eng, rc);
    }

    int rc = XMOE_OK;
    if (gen->parsed()) {
        rc = xmoe_gen_data(eng, out_dir.c_str());
    } else if (pre->parsed()) {
        rc = xmoe_pretrain(eng, out_dir.c_str());
    } else if (fine->parsed()) {
        rc = xmoe_finetune(eng, checkpoint.c_str(), out_dir.c_str());
    } else if (ana->parsed()) {
        std::vector<const char*> ptrs;
        for (const std::string& s : inputs) ptrs.push_back(s.c_str());
        rc = xmoe_analyze(eng, kind.c_str(), ptrs.data(), ptrs.size(), out_dir.c_str());
    } else if (abl->parsed()) {
        rc = xmoe_ablate(eng, axis.c_str(), values.c_str(), out_dir.c_str());
    }

    if (rc != XMOE_OK) {
        return fail(eng, rc);
    }
    return 0;
}
