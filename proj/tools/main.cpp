// Command-line front end of the concept-mining pipeline. Talks to the core
// library exclusively through its public C interface.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "babelminer.h"

namespace {

const char* code_name(int code) {
    switch (code) {
        case BM_OK: return "ok";
        case BM_ERR_CONFIG: return "config";
        case BM_ERR_IO: return "io";
        case BM_ERR_PARSE: return "parse";
        case BM_ERR_CONSISTENCY: return "consistency";
        case BM_ERR_ARGUMENT: return "argument";
        default: return "runtime";
    }
}

// One machine-readable error record on stderr, then a nonzero exit.
int fail(const std::string& stage, int code, const std::string& message) {
    nlohmann::json record = {
        {"error", code_name(code)}, {"code", code}, {"stage", stage}, {"message", message}};
    std::fprintf(stderr, "%s\n", record.dump().c_str());
    return code == BM_OK ? 1 : code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weakly-supervised concept mining over multi-view reconstructions"};
    app.set_version_flag("--version", std::string(bm_version()));
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string data_dir, output_dir;
    std::string seed;
    app.add_option("-c,--config", config_path, "Structured config file (merged over defaults)");
    app.add_option("-s,--set", overrides,
                   "Override one config key, e.g. --set mining.min_rho=0.2 (repeatable)");
    app.add_option("--data-dir", data_dir, "Shortcut for --set paths.data_dir=...");
    app.add_option("--output-dir", output_dir, "Shortcut for --set paths.output_dir=...");
    app.add_option("--seed", seed, "Shortcut for --set seed=...");

    for (const char* name : {"ingest", "mine", "label", "pairs", "train-toy", "fuse", "metrics",
                             "augment", "synth", "selftest"})
        app.add_subcommand(name)->fallthrough();

    CLI11_PARSE(app, argc, argv);
    const std::string subcommand = app.get_subcommands().front()->get_name();

    bm_ctx* ctx = bm_create();
    if (!ctx) return fail(subcommand, BM_ERR_RUNTIME, "context allocation failed");

    int rc = BM_OK;
    if (!config_path.empty()) rc = bm_load_config(ctx, config_path.c_str());

    if (rc == BM_OK && !data_dir.empty()) rc = bm_set_option(ctx, "paths.data_dir", data_dir.c_str());
    if (rc == BM_OK && !output_dir.empty())
        rc = bm_set_option(ctx, "paths.output_dir", output_dir.c_str());
    if (rc == BM_OK && !seed.empty()) rc = bm_set_option(ctx, "seed", seed.c_str());
    for (const std::string& kv : overrides) {
        if (rc != BM_OK) break;
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            bm_destroy(ctx);
            return fail(subcommand, BM_ERR_CONFIG, "override must look like key=value: " + kv);
        }
        rc = bm_set_option(ctx, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    }

    std::string stage = rc == BM_OK ? subcommand : "configure";
    if (rc == BM_OK) rc = bm_run(ctx, subcommand.c_str());

    if (rc != BM_OK) {
        std::string message = bm_last_error(ctx);
        bm_destroy(ctx);
        return fail(stage, rc, message);
    }
    bm_destroy(ctx);
    return 0;
}
