#ifndef UMC_H
#define UMC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum UmcStatus {
  UMC_STATUS_OK = 0,
  UMC_STATUS_NULL_POINTER = 1,
  UMC_STATUS_INVALID_ARGUMENT = 2,
  UMC_STATUS_CONFIG = 3,
  UMC_STATUS_PARSE = 4,
  UMC_STATUS_DECODE = 5,
  UMC_STATUS_SHAPE = 6,
  UMC_STATUS_PARAM = 7,
  UMC_STATUS_IO = 8,
  UMC_STATUS_RUNTIME = 9,
  UMC_STATUS_BUFFER_TOO_SMALL = 10,
  UMC_STATUS_PANIC = 11,
} UmcStatus;

// Scenario configuration.
typedef struct UmcConfig UmcConfig;

// A decoded wire packet.
typedef struct UmcPacket UmcPacket;

// Network weights.
typedef struct UmcParams UmcParams;

// Outputs of one simulated episode.
typedef struct UmcReport UmcReport;

// Header fields of a packet.
typedef struct UmcPacketInfo {
  uint16_t sender_id;
  uint16_t receiver_id;
  uint32_t timestep;
  uint8_t resolution_level;
  uint32_t height;
  uint32_t width;
  uint32_t channels;
  uint64_t entries;
  uint64_t feature_scalars;
} UmcPacketInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *umc_version(void);

// Copies the calling thread's last error message; empty after a success.
// Does not itself change the stored message.
//
// # Safety
// `buf` must be writable for `cap` bytes; `out_len` may be null.
enum UmcStatus umc_last_error(char *buf, size_t cap, size_t *out_len);

// Default scenario.
//
// # Safety
// `out` must be a valid pointer.
enum UmcStatus umc_config_default(struct UmcConfig **out);

// Scenario from TOML text; unset keys keep their defaults.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum UmcStatus umc_config_from_toml(const char *toml, struct UmcConfig **out);

// Serializes the scenario as TOML.
//
// # Safety
// `cfg` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_config_to_toml(const struct UmcConfig *cfg,
                                  char *buf,
                                  size_t cap,
                                  size_t *out_len);

// Sets the self and cross keep fractions, each in (0, 1].
//
// # Safety
// `cfg` must be a live handle.
enum UmcStatus umc_config_set_deltas(struct UmcConfig *cfg, double delta_s, double delta_c);

// # Safety
// `cfg` must be a live handle.
enum UmcStatus umc_config_set_seed(struct UmcConfig *cfg, uint64_t seed);

// # Safety
// `cfg` must be a live handle.
enum UmcStatus umc_config_set_timesteps(struct UmcConfig *cfg, uint32_t timesteps);

// # Safety
// `cfg` must be null or a handle not yet freed.
void umc_config_free(struct UmcConfig *cfg);

// Seeded weights for every layer the scenario uses.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum UmcStatus umc_params_init(const struct UmcConfig *cfg, uint64_t seed, struct UmcParams **out);

// Reads a `.umcp` parameter file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum UmcStatus umc_params_load(const char *path, struct UmcParams **out);

// Writes a `.umcp` parameter file.
//
// # Safety
// `params` must be a live handle and `path` a NUL-terminated string.
enum UmcStatus umc_params_save(const struct UmcParams *params, const char *path);

// # Safety
// `params` must be null or a handle not yet freed.
void umc_params_free(struct UmcParams *params);

// Runs one episode. `selection = 0` sends every cell without queries.
// `threads = 0` uses every available core.
//
// # Safety
// `cfg` and `params` must be live handles and `out` a valid pointer.
enum UmcStatus umc_run_episode(const struct UmcConfig *cfg,
                               const struct UmcParams *params,
                               int32_t selection,
                               uint32_t threads,
                               struct UmcReport **out);

// Mean over agents of the log of transmitted scalars.
//
// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum UmcStatus umc_report_communication_volume(const struct UmcReport *report, double *out);

// Mean feature scalars per feature packet; 0 when nothing was sent.
//
// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum UmcStatus umc_report_mean_feature_scalars(const struct UmcReport *report, double *out);

// Detections as JSON lines, one record per (frame, agent).
//
// # Safety
// `report` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_report_detections_jsonl(const struct UmcReport *report,
                                           char *buf,
                                           size_t cap,
                                           size_t *out_len);

// Ground truth as JSON lines.
//
// # Safety
// `report` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_report_ground_truth_jsonl(const struct UmcReport *report,
                                             char *buf,
                                             size_t cap,
                                             size_t *out_len);

// Metrics as `metric,iou,value` CSV.
//
// # Safety
// `report` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_report_metrics_csv(const struct UmcReport *report,
                                      char *buf,
                                      size_t cap,
                                      size_t *out_len);

// Per-transfer communication ledger as CSV.
//
// # Safety
// `report` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_report_ledger_csv(const struct UmcReport *report,
                                     char *buf,
                                     size_t cap,
                                     size_t *out_len);

// # Safety
// `report` must be null or a handle not yet freed.
void umc_report_free(struct UmcReport *report);

// Decodes packet bytes. Malformed input yields `UMC_STATUS_DECODE`.
//
// # Safety
// `bytes` must be readable for `len` bytes and `out` a valid pointer.
enum UmcStatus umc_packet_decode(const uint8_t *bytes, size_t len, struct UmcPacket **out);

// # Safety
// `packet` must be a live handle and `out` a valid pointer.
enum UmcStatus umc_packet_info(const struct UmcPacket *packet, struct UmcPacketInfo *out);

// Densifies the packet into `buf` as `channels * height * width` floats,
// channel-major, unsent cells zero. `cap` counts floats.
//
// # Safety
// `packet` must be a live handle; `buf` writable for `cap` floats.
enum UmcStatus umc_packet_dense(const struct UmcPacket *packet,
                                float *buf,
                                size_t cap,
                                size_t *out_len);

// Re-encodes the packet to its canonical bytes.
//
// # Safety
// `packet` must be a live handle; `buf` writable for `cap` bytes.
enum UmcStatus umc_packet_encode(const struct UmcPacket *packet,
                                 uint8_t *buf,
                                 size_t cap,
                                 size_t *out_len);

// # Safety
// `packet` must be null or a handle not yet freed.
void umc_packet_free(struct UmcPacket *packet);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UMC_H */
