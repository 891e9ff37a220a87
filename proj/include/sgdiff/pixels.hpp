#pragma once

namespace sgdiff {

/// Raw value written into background pixels before normalisation.
inline constexpr float kMaskedRaw = -255.0f;
/// kMaskedRaw after normalisation; never produced by a valid pixel.
inline constexpr float kBackgroundSentinel = kMaskedRaw / 127.5f - 1.0f;

/// [0, 255] -> [-1, 1].
inline constexpr float normalize_pixel(float raw) { return raw / 127.5f - 1.0f; }
inline constexpr float denormalize_pixel(float x) { return (x + 1.0f) * 127.5f; }

}  // namespace sgdiff
