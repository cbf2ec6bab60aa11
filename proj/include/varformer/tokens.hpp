#pragma once

namespace varformer {

// Reserved ids at the head of every vocabulary. The CTC blank is always the
// last id, so it depends on the vocabulary size.
inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
inline constexpr int kNumReserved = 3;

}  // namespace varformer
