/* Register-blocked valid cross-correlation on a flat "wide" grid.
 *
 * x     : flat padded input with at least DISTSEG_TILE elements of slack
 * wt    : weights as [block][tap][4]
 * offs  : flat input offset of every tap
 * out   : [block * 4][n_tiles * DISTSEG_TILE]
 *
 * Each tile of DISTSEG_TILE outputs for 4 output channels is accumulated in
 * registers over all taps, in tap order, then stored once.
 */
#ifndef DISTSEG_CORR_IMPL_H
#define DISTSEG_CORR_IMPL_H

#include <stddef.h>
#include <string.h>

#define DISTSEG_TILE 8

#define DISTSEG_DEFINE_CORR(NAME, T)                                           \
typedef T NAME##_vec __attribute__((vector_size(32)));                         \
static void NAME(const T *restrict x, const T *restrict wt,                    \
                 const ptrdiff_t *restrict offs, ptrdiff_t ntap,               \
                 ptrdiff_t n_blk, ptrdiff_t n_tiles, T *restrict out)          \
{                                                                              \
    enum { LANES = 32 / sizeof(T), NV = DISTSEG_TILE / LANES };                \
    ptrdiff_t row = n_tiles * DISTSEG_TILE;                                    \
    for (ptrdiff_t ob = 0; ob < n_blk; ++ob) {                                 \
        const T *wb = wt + ob * ntap * 4;                                      \
        T *ob0 = out + (ob * 4) * row;                                         \
        for (ptrdiff_t tt = 0; tt < n_tiles; ++tt) {                           \
            ptrdiff_t t0 = tt * DISTSEG_TILE;                                  \
            NAME##_vec acc[4][NV];                                             \
            for (int r = 0; r < 4; ++r)                                        \
                for (int v = 0; v < NV; ++v)                                   \
                    acc[r][v] = (NAME##_vec){0};                               \
            for (ptrdiff_t k = 0; k < ntap; ++k) {                             \
                const T *xp = x + offs[k] + t0;                                \
                const T *wk = wb + 4 * k;                                      \
                for (int v = 0; v < NV; ++v) {                                 \
                    NAME##_vec xv;                                             \
                    memcpy(&xv, xp + v * LANES, sizeof xv);                    \
                    acc[0][v] += wk[0] * xv;                                   \
                    acc[1][v] += wk[1] * xv;                                   \
                    acc[2][v] += wk[2] * xv;                                   \
                    acc[3][v] += wk[3] * xv;                                   \
                }                                                              \
            }                                                                  \
            for (int r = 0; r < 4; ++r)                                        \
                for (int v = 0; v < NV; ++v)                                   \
                    memcpy(ob0 + r * row + t0 + v * LANES, &acc[r][v],         \
                           sizeof acc[r][v]);                                  \
        }                                                                      \
    }                                                                          \
}

/* Weight gradient: dw[r][k] = sum_t g[r][t] * x[offs[k] + t].
 *
 * g  : [n_blk * 4][n_tiles * DISTSEG_TILE], zero in junk columns
 * dw : [n_blk * 4][ntap]
 */
#define DISTSEG_DEFINE_WGRAD(NAME, T, VEC)                                     \
static void NAME(const T *restrict x, const T *restrict g,                     \
                 const ptrdiff_t *restrict offs, ptrdiff_t ntap,               \
                 ptrdiff_t n_blk, ptrdiff_t n_tiles, T *restrict dw)           \
{                                                                              \
    enum { LANES = 32 / sizeof(T), NV = DISTSEG_TILE / LANES };                \
    ptrdiff_t row = n_tiles * DISTSEG_TILE;                                    \
    for (ptrdiff_t ob = 0; ob < n_blk; ++ob) {                                 \
        const T *gb = g + (ob * 4) * row;                                      \
        for (ptrdiff_t k = 0; k < ntap; ++k) {                                 \
            const T *xk = x + offs[k];                                         \
            VEC acc[4][NV];                                                    \
            for (int r = 0; r < 4; ++r)                                        \
                for (int v = 0; v < NV; ++v)                                   \
                    acc[r][v] = (VEC){0};                                      \
            for (ptrdiff_t t0 = 0; t0 < row; t0 += DISTSEG_TILE) {             \
                for (int v = 0; v < NV; ++v) {                                 \
                    VEC xv, g0, g1, g2, g3;                                    \
                    ptrdiff_t t = t0 + v * LANES;                              \
                    memcpy(&xv, xk + t, sizeof xv);                            \
                    memcpy(&g0, gb + t, sizeof xv);                            \
                    memcpy(&g1, gb + row + t, sizeof xv);                      \
                    memcpy(&g2, gb + 2 * row + t, sizeof xv);                  \
                    memcpy(&g3, gb + 3 * row + t, sizeof xv);                  \
                    acc[0][v] += g0 * xv;                                      \
                    acc[1][v] += g1 * xv;                                      \
                    acc[2][v] += g2 * xv;                                      \
                    acc[3][v] += g3 * xv;                                      \
                }                                                              \
            }                                                                  \
            for (int r = 0; r < 4; ++r) {                                      \
                T total = 0;                                                   \
                for (int v = 0; v < NV; ++v)                                   \
                    for (int l = 0; l < LANES; ++l)                            \
                        total += acc[r][v][l];                                 \
                dw[(ob * 4 + r) * ntap + k] = total;                           \
            }                                                                  \
        }                                                                      \
    }                                                                          \
}

DISTSEG_DEFINE_CORR(distseg_corr_d, double)
DISTSEG_DEFINE_CORR(distseg_corr_f, float)
DISTSEG_DEFINE_WGRAD(distseg_wgrad_d, double, distseg_corr_d_vec)
DISTSEG_DEFINE_WGRAD(distseg_wgrad_f, float, distseg_corr_f_vec)

#endif
