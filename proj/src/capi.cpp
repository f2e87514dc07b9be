#include "babelminer.h"

#include <exception>
#include <functional>
#include <new>
#include <string>

#include "babelminer/common.hpp"
#include "babelminer/pipeline.hpp"

struct bm_ctx {
    babelminer::pipeline::PipelineConfig config =
        babelminer::pipeline::PipelineConfig::defaults();
    std::string last_error;
    std::string config_echo;
};

namespace {

int guard(bm_ctx* ctx, const std::function<void()>& body) {
    if (!ctx) return BM_ERR_ARGUMENT;
    ctx->last_error.clear();
    try {
        body();
        return BM_OK;
    } catch (const babelminer::ConfigError& e) {
        ctx->last_error = e.what();
        return BM_ERR_CONFIG;
    } catch (const babelminer::IoError& e) {
        ctx->last_error = e.what();
        return BM_ERR_IO;
    } catch (const babelminer::ParseError& e) {
        ctx->last_error = e.what();
        return BM_ERR_PARSE;
    } catch (const babelminer::ConsistencyError& e) {
        ctx->last_error = e.what();
        return BM_ERR_CONSISTENCY;
    } catch (const std::exception& e) {
        ctx->last_error = e.what();
        return BM_ERR_RUNTIME;
    } catch (...) {
        ctx->last_error = "unknown error";
        return BM_ERR_RUNTIME;
    }
}

}  // namespace

extern "C" {

const char* bm_version(void) { return "0.1.0"; }

bm_ctx* bm_create(void) { return new (std::nothrow) bm_ctx; }

void bm_destroy(bm_ctx* ctx) { delete ctx; }

int bm_load_config(bm_ctx* ctx, const char* path) {
    if (ctx && !path) {
        ctx->last_error = "null config path";
        return BM_ERR_ARGUMENT;
    }
    return guard(ctx, [&] {
        ctx->config = babelminer::pipeline::PipelineConfig::from_file(path);
    });
}

int bm_set_option(bm_ctx* ctx, const char* dotted_key, const char* value) {
    if (ctx && (!dotted_key || !value)) {
        ctx->last_error = "null option key or value";
        return BM_ERR_ARGUMENT;
    }
    return guard(ctx, [&] { ctx->config.set_option(dotted_key, value); });
}

int bm_run(bm_ctx* ctx, const char* subcommand) {
    if (ctx && !subcommand) {
        ctx->last_error = "null subcommand";
        return BM_ERR_ARGUMENT;
    }
    return guard(ctx, [&] { babelminer::pipeline::run(subcommand, ctx->config); });
}

const char* bm_last_error(const bm_ctx* ctx) {
    return ctx ? ctx->last_error.c_str() : "null context";
}

const char* bm_effective_config(bm_ctx* ctx) {
    if (!ctx) return "";
    ctx->config_echo = ctx->config.dump();
    return ctx->config_echo.c_str();
}

}  // extern "C"
