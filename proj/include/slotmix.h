/* C interface to the slotmix library: an opaque run-configuration handle and
 * one entry point per command. Every command returns 0 on success, 2 on a
 * contract violation (bad config, malformed file), 3 on a numerical failure;
 * slotmix_last_error() describes the most recent failure on this thread. */
#ifndef SLOTMIX_H
#define SLOTMIX_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct slotmix_config slotmix_config;

/* Static version string. */
const char* slotmix_version(void);

/* Message from the most recent failing call on this thread; "" after a
 * success. The buffer is owned by the library and stable until the next call
 * on the same thread. */
const char* slotmix_last_error(void);

/* Fresh configuration with default values; NULL on allocation failure. */
slotmix_config* slotmix_config_new(void);

/* Configuration parsed from a key = value file; NULL on failure. */
slotmix_config* slotmix_config_load(const char* path);

void slotmix_config_free(slotmix_config* cfg);

/* Sets one key; returns 0 or 2 (unknown key, malformed value). */
int slotmix_config_set(slotmix_config* cfg, const char* key, const char* value);

/* Copies the canonical key = value text into buf (NUL-terminated, truncated
 * to cap when needed) and returns the full untruncated length. buf may be
 * NULL to query the length. */
size_t slotmix_config_text(const slotmix_config* cfg, char* buf, size_t cap);

/* Commands. When paths/cap is nonzero the newline-joined list of files the
 * command wrote is copied into it (NUL-terminated, truncated to cap). */
int slotmix_synth(const slotmix_config* cfg, char* paths, size_t cap);
int slotmix_train(const slotmix_config* cfg, char* paths, size_t cap);
int slotmix_aggregate(const slotmix_config* cfg, const char* checkpoint, char* paths, size_t cap);
int slotmix_identifiability(const slotmix_config* cfg, const char* const* checkpoints, size_t count,
                            char* paths, size_t cap);
int slotmix_ard_report(const slotmix_config* cfg, const char* checkpoint, char* paths, size_t cap);

/* mode is "aggregate" (input = mixture file) or "concat" (input = checkpoint,
 * drawing slot concatenations for the scene at scene_index). */
int slotmix_sample(const slotmix_config* cfg, const char* input, int count, const char* mode,
                   int scene_index, char* paths, size_t cap);

/* One panel per input: .json mixture files become density panels, anything
 * else is read as a dataset and scattered. */
int slotmix_plot(const slotmix_config* cfg, const char* const* inputs, size_t count,
                 const char* out_path, char* paths, size_t cap);

#ifdef __cplusplus
}
#endif

#endif /* SLOTMIX_H */
