"""Slow, loop-per-pixel reference implementations used as test oracles.

They share only the addressing convention with the package (texel k of a
chart of width w sits at u = (k + 0.5) / w, positions clamped into the chart),
not any of its code.
"""
import numpy as np


def _chart(atlas, part):
    c = atlas.part_uv_charts[part - 1]
    return c.row, c.col, c.height, c.width


def _stencil(atlas, part, u, v):
    r0, c0, h, w = _chart(atlas, part)
    r = min(max(v * h - 0.5, 0.0), h - 1)
    c = min(max(u * w - 0.5, 0.0), w - 1)
    ra, ca = int(np.floor(r)), int(np.floor(c))
    fr, fc = r - ra, c - ca
    rb, cb = min(ra + 1, h - 1), min(ca + 1, w - 1)
    return [((r0 + ra, c0 + ca), (1 - fr) * (1 - fc)), ((r0 + ra, c0 + cb), (1 - fr) * fc),
            ((r0 + rb, c0 + ca), fr * (1 - fc)), ((r0 + rb, c0 + cb), fr * fc)]


def image_to_uv(iuv, atlas, values, valid):
    """values HxWxC, valid HxW -> (Huv x Wuv x C, mask)."""
    Hu, Wu = atlas.uv_resolution
    C = values.shape[-1]
    acc = np.zeros((Hu, Wu, C))
    wsum = np.zeros((Hu, Wu))
    H, W = iuv.shape
    for i in range(H):
        for j in range(W):
            k = iuv.part[i, j]
            if k == 0 or not valid[i, j]:
                continue
            for (r, c), w in _stencil(atlas, k, iuv.u[i, j], iuv.v[i, j]):
                acc[r, c] += w * values[i, j]
                wsum[r, c] += w
    mask = (wsum > 1e-4).astype(float)
    out = np.zeros_like(acc)
    for r in range(Hu):
        for c in range(Wu):
            if mask[r, c]:
                out[r, c] = acc[r, c] / wsum[r, c]
    return out, mask


def uv_to_image(uv_values, uv_mask, iuv, atlas, fill=-2.0):
    """Mask-normalized gather, Huv x Wuv x C -> (H x W x C, mask)."""
    H, W = iuv.shape
    C = uv_values.shape[-1]
    out = np.full((H, W, C), fill)
    mask = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            k = iuv.part[i, j]
            if k == 0:
                continue
            num, den = np.zeros(C), 0.0
            for (r, c), w in _stencil(atlas, k, iuv.u[i, j], iuv.v[i, j]):
                num += w * uv_mask[r, c] * uv_values[r, c]
                den += w * uv_mask[r, c]
            if den > 1e-4:
                out[i, j] = num / den
                mask[i, j] = 1.0
    return out, mask


def bilinear(source, coords, mask):
    """source HxWxC, coords H'xW'x2 normalized, mask H'xW' -> H'xW'xC, zero padding."""
    H, W, C = source.shape
    Ho, Wo = coords.shape[:2]
    out = np.zeros((Ho, Wo, C))
    for i in range(Ho):
        for j in range(Wo):
            if not mask[i, j]:
                continue
            x = ((coords[i, j, 0] + 1) * W - 1) / 2
            y = ((coords[i, j, 1] + 1) * H - 1) / 2
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            for yy in (y0, y0 + 1):
                for xx in (x0, x0 + 1):
                    if 0 <= yy < H and 0 <= xx < W:
                        w = (1 - abs(x - xx)) * (1 - abs(y - yy))
                        out[i, j] += w * source[yy, xx]
    return out


def ssim_reference(a, b, data_range=1.0, sigma=1.5, win=11):
    """Direct per-window SSIM (valid windows only), mean over windows and channels."""
    half = win // 2
    x = np.arange(win) - half
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    k = np.outer(g, g)
    k /= k.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        A, B = a[..., ch], b[..., ch]
        for i in range(A.shape[0] - win + 1):
            for j in range(A.shape[1] - win + 1):
                pa, pb = A[i:i + win, j:j + win], B[i:i + win, j:j + win]
                ma, mb = (k * pa).sum(), (k * pb).sum()
                va = (k * pa * pa).sum() - ma ** 2
                vb = (k * pb * pb).sum() - mb ** 2
                cov = (k * pa * pb).sum() - ma * mb
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar f at numpy array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g
