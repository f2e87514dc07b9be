/* Public C interface of the concept-mining pipeline library.
 *
 * Usage: create a context, optionally load a config file, apply individual
 * option overrides, then run subcommands. All functions return a status code;
 * bm_last_error() describes the most recent failure on the context. */
#ifndef BABELMINER_H
#define BABELMINER_H

#ifdef __cplusplus
extern "C" {
#endif

typedef struct bm_ctx bm_ctx;

/* Status codes. */
enum {
    BM_OK = 0,
    BM_ERR_CONFIG = 1,      /* invalid configuration or unknown key/subcommand */
    BM_ERR_IO = 2,          /* file system failure */
    BM_ERR_PARSE = 3,       /* malformed input file */
    BM_ERR_CONSISTENCY = 4, /* input violates a structural invariant */
    BM_ERR_RUNTIME = 5,     /* any other failure */
    BM_ERR_ARGUMENT = 6     /* null pointer passed to the API */
};

/* Library version string, static storage. */
const char* bm_version(void);

/* Creates a context holding the default configuration. Returns NULL only on
 * allocation failure. */
bm_ctx* bm_create(void);

void bm_destroy(bm_ctx* ctx);

/* Merges a structured config file over the defaults. */
int bm_load_config(bm_ctx* ctx, const char* path);

/* Overrides one key by dotted path, e.g. ("mining.min_rho", "0.2").
 * The value is parsed as a scalar when possible, else kept as a string. */
int bm_set_option(bm_ctx* ctx, const char* dotted_key, const char* value);

/* Runs one pipeline subcommand (ingest, mine, label, pairs, train-toy, fuse,
 * metrics, augment, synth, selftest) with the context's configuration. */
int bm_run(bm_ctx* ctx, const char* subcommand);

/* Message of the most recent error on this context; empty string if none.
 * Valid until the next API call on the same context. */
const char* bm_last_error(const bm_ctx* ctx);

/* Effective configuration as structured text; valid until the next API call
 * on the same context. */
const char* bm_effective_config(bm_ctx* ctx);

#ifdef __cplusplus
}
#endif

#endif /* BABELMINER_H */
