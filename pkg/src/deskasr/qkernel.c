/* INT8 linear layer for AVX-512 VNNI.
 *
 * out[m][n] = dequant(quant(x[m][k]) . wq[n][k]^T) + bias
 *
 * Activations are quantized per row, symmetric, round half away from zero,
 * then shifted by +128 to unsigned bytes so vpdpbusd (u8 x s8) can be used;
 * the shift is removed with the per-column weight sums.  Each int32 lane
 * accumulates at most 255*127*k in magnitude, so k <= 66311 cannot
 * overflow; the Python side refuses larger k.
 *
 * Weights are pre-packed as [n_pad/16][k_pad/4][16][4] int8.
 */
#include <float.h>
#include <immintrin.h>
#include <stdint.h>
#include <stdlib.h>

static inline __mmask16 tail_mask(int left) {
    return left >= 16 ? (__mmask16)0xFFFF : (__mmask16)((1u << left) - 1u);
}

static void quantize_rows(const float *x, uint8_t *xq, float *xscale, int m, int k, int kp) {
    const __m512 half = _mm512_set1_ps(0.5f), nhalf = _mm512_set1_ps(-0.5f), one = _mm512_set1_ps(1.f);
    const __m512 lo = _mm512_set1_ps(-127.f), hi = _mm512_set1_ps(127.f);
    const __m512i off = _mm512_set1_epi32(128);
    for (int i = 0; i < m; i++) {
        const float *xr = x + (long)i * k;
        __m512 vm = _mm512_setzero_ps();
        for (int p = 0; p < k; p += 16)
            vm = _mm512_max_ps(vm, _mm512_abs_ps(_mm512_maskz_loadu_ps(tail_mask(k - p), xr + p)));
        float mx = _mm512_reduce_max_ps(vm);
        float s = mx > 0.f ? mx / 127.f : 1.f;
        if (s < FLT_MIN) s = FLT_MIN; /* keeps 1/s finite for subnormal rows */
        float inv = 1.f / s;
        xscale[i] = s;
        uint8_t *q = xq + (long)i * kp;
        __m512 vinv = _mm512_set1_ps(inv);
        for (int p = 0; p < k; p += 16) {
            __mmask16 msk = tail_mask(k - p);
            __m512 v = _mm512_mul_ps(_mm512_maskz_loadu_ps(msk, xr + p), vinv);
            __m512 r = _mm512_roundscale_ps(v, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
            __m512 d = _mm512_sub_ps(v, r);
            r = _mm512_mask_add_ps(r, _mm512_cmp_ps_mask(d, half, _CMP_GE_OQ), r, one);
            r = _mm512_mask_sub_ps(r, _mm512_cmp_ps_mask(d, nhalf, _CMP_LE_OQ), r, one);
            r = _mm512_min_ps(_mm512_max_ps(r, lo), hi);
            __m128i b = _mm512_cvtepi32_epi8(_mm512_add_epi32(_mm512_cvttps_epi32(r), off));
            _mm_mask_storeu_epi8(q + p, msk, b);
        }
        for (int p = k; p < kp; p++) q[p] = 128; /* zero after the shift */
    }
}

static inline void store_block(float *dst, __m512i acc, __m512i cs, __m512 ws, float xs, __m512 bs, __mmask16 msk) {
    __m512 f = _mm512_cvtepi32_ps(_mm512_sub_epi32(acc, cs));
    f = _mm512_fmadd_ps(f, _mm512_mul_ps(ws, _mm512_set1_ps(xs)), bs);
    _mm512_mask_storeu_ps(dst, msk, f);
}

/* colsum128 = 128 * sum_k wq[n][k]; wscale/bias/colsum128 padded to n_pad. */
void deskasr_qlinear(const float *x, const int8_t *wp, const int32_t *colsum128, const float *wscale, const float *bias,
                     float *out, int m, int k, int kp, int n) {
    int nb = (n + 15) / 16, kb = kp / 4;
    uint8_t *xq = (uint8_t *)malloc((size_t)m * kp + 64);
    float *xscale = (float *)malloc(sizeof(float) * (size_t)(m + 4));
    if (!xq || !xscale) {
        free(xq);
        free(xscale);
        return;
    }
    quantize_rows(x, xq, xscale, m, k, kp);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const int32_t *r0 = (const int32_t *)(xq + (long)i * kp);
        const int32_t *r1 = r0 + kb, *r2 = r1 + kb, *r3 = r2 + kb;
        for (int b = 0; b < nb; b++) {
            const __m512i *wb = (const __m512i *)(wp + (long)b * kb * 64);
            __m512i a0 = _mm512_setzero_si512(), a1 = a0, a2 = a0, a3 = a0;
            for (int p = 0; p < kb; p++) {
                __m512i w = _mm512_loadu_si512(wb + p);
                a0 = _mm512_dpbusd_epi32(a0, _mm512_set1_epi32(r0[p]), w);
                a1 = _mm512_dpbusd_epi32(a1, _mm512_set1_epi32(r1[p]), w);
                a2 = _mm512_dpbusd_epi32(a2, _mm512_set1_epi32(r2[p]), w);
                a3 = _mm512_dpbusd_epi32(a3, _mm512_set1_epi32(r3[p]), w);
            }
            __m512i cs = _mm512_loadu_si512(colsum128 + b * 16);
            __m512 ws = _mm512_loadu_ps(wscale + b * 16);
            __m512 bs = bias ? _mm512_loadu_ps(bias + b * 16) : _mm512_setzero_ps();
            __mmask16 msk = tail_mask(n - b * 16);
            store_block(out + (long)(i + 0) * n + b * 16, a0, cs, ws, xscale[i + 0], bs, msk);
            store_block(out + (long)(i + 1) * n + b * 16, a1, cs, ws, xscale[i + 1], bs, msk);
            store_block(out + (long)(i + 2) * n + b * 16, a2, cs, ws, xscale[i + 2], bs, msk);
            store_block(out + (long)(i + 3) * n + b * 16, a3, cs, ws, xscale[i + 3], bs, msk);
        }
    }
    for (; i < m; i++) {
        const int32_t *r0 = (const int32_t *)(xq + (long)i * kp);
        for (int b = 0; b < nb; b++) {
            const __m512i *wb = (const __m512i *)(wp + (long)b * kb * 64);
            __m512i a0 = _mm512_setzero_si512();
            for (int p = 0; p < kb; p++) a0 = _mm512_dpbusd_epi32(a0, _mm512_set1_epi32(r0[p]), _mm512_loadu_si512(wb + p));
            __m512 bs = bias ? _mm512_loadu_ps(bias + b * 16) : _mm512_setzero_ps();
            store_block(out + (long)i * n + b * 16, a0, _mm512_loadu_si512(colsum128 + b * 16), _mm512_loadu_ps(wscale + b * 16),
                        xscale[i], bs, tail_mask(n - b * 16));
        }
    }
    free(xq);
    free(xscale);
}

/* Exact integer products for testing: acc[m][n] = sum_k xq[m][k] * wq[n][k] (both already int8). */
void deskasr_igemm(const int8_t *xq, const int8_t *wq, int32_t *acc, int m, int k, int n) {
    for (int i = 0; i < m; i++)
        for (int j = 0; j < n; j++) {
            int32_t s = 0;
            for (int p = 0; p < k; p++) s += (int32_t)xq[(long)i * k + p] * (int32_t)wq[(long)j * k + p];
            acc[(long)i * n + j] = s;
        }
}
