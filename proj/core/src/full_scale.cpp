#include "resprobe/full_scale.hpp"

#include <stdexcept>

namespace resprobe::full_scale {

namespace {

int64_t conv(int64_t in, int64_t out, int64_t k) { return k * k * in * out + out; }
int64_t bn4(int64_t c) { return 4 * c; }  // gamma, beta, moving mean, moving var
int64_t bn2(int64_t c) { return 2 * c; }  // gamma, beta

int64_t uniform_block4(int64_t c) { return 2 * bn4(c) + 2 * conv(c, c, 3); }
int64_t uniform_block2(int64_t c) { return 2 * bn2(c) + 2 * conv(c, c, 3); }

}  // namespace

int64_t single_repr_reference_count(int classes) {
  int64_t total = conv(3, 100, 3);
  total += 10 * uniform_block4(100);
  total += bn4(100);
  total += 100 * 4 * 4 * classes + classes;  // 8x8 pool of a 32x32 map -> 4x4
  return total;
}

int64_t wide_reference_count(int classes) {
  const int64_t widths[3] = {160, 320, 640};
  int64_t total = conv(3, 16, 3);
  int64_t in = 16;
  for (int64_t c : widths) {
    // the width transition opens each group: BN(in), conv in->c, BN(c),
    // conv c->c, and a 1x1 projection on the skip; the four
    // shape-preserving blocks then follow the first group's transition,
    // which itself stands in for one of that group's four
    total += bn4(in) + conv(in, c, 3) + bn4(c) + conv(c, c, 3) + conv(in, c, 1);
    total += (in == 16 ? 3 : 4) * uniform_block4(c);
    in = c;
  }
  total += bn4(640);
  total += 640 * classes + classes;  // stages end at 8x8, pooled to 1x1
  return total;
}

namespace {

struct PreactStage {
  int64_t in, c, blocks;
};

int64_t preact_count(int n_per_stage, int classes, int unique_blocks, int apps) {
  const PreactStage stages[3] = {{16, 16, 0}, {16, 32, 0}, {32, 64, 0}};
  int64_t total = conv(3, 16, 3);
  for (int s = 0; s < 3; ++s) {
    int64_t in = stages[s].in, c = stages[s].c;
    int64_t uniq = unique_blocks > 0 ? unique_blocks : n_per_stage;
    // first block carries the width/stride transition for stages 2 and 3
    if (s == 0) {
      total += uniform_block2(c);
    } else {
      total += bn2(in) + conv(in, c, 3) + bn2(c) + conv(c, c, 3);
      total += conv(in, c, 1);  // projection on the skip path
    }
    total += (uniq - 1) * uniform_block2(c);
    if (apps > 0) {
      // per-application gamma/beta beyond the pairs counted inside blocks
      total += (2 * apps - 2 * uniq) * bn2(c);
    }
  }
  total += bn2(64);
  total += 64 * classes + classes;
  return total;
}

}  // namespace

int64_t preact_resnet_reference_count(int depth, int classes) {
  if ((depth - 2) % 6 != 0) throw std::invalid_argument("depth must be 6n+2");
  return preact_count((depth - 2) / 6, classes, 0, 0);
}

int64_t preact_resnet_ubn_reference_count(int depth, int share_from, int classes) {
  if ((depth - 2) % 6 != 0) throw std::invalid_argument("depth must be 6n+2");
  int n = (depth - 2) / 6;
  if (share_from < 1 || share_from >= n)
    throw std::invalid_argument("share_from must leave at least one shared application");
  return preact_count(n, classes, share_from + 1, n);
}

}  // namespace resprobe::full_scale
