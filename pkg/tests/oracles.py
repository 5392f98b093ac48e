"""Brute-force reference implementations used by the unit tests."""
import numpy as np


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct six-loop summation of a grouped, dilated, strided convolution."""
    n, channels, height, width = x.shape
    out_channels, group_channels, kernel_h, kernel_w = weight.shape
    out_h = (height + 2 * padding - dilation * (kernel_h - 1) - 1) // stride + 1
    out_w = (width + 2 * padding - dilation * (kernel_w - 1) - 1) // stride + 1
    group_out = out_channels // groups
    out = np.zeros((n, out_channels, out_h, out_w))
    for b in range(n):
        for o in range(out_channels):
            group = o // group_out
            for y in range(out_h):
                for x_pos in range(out_w):
                    total = 0.0 if bias is None else float(bias[o])
                    for i in range(group_channels):
                        for ky in range(kernel_h):
                            for kx in range(kernel_w):
                                row = y * stride - padding + ky * dilation
                                col = x_pos * stride - padding + kx * dilation
                                if 0 <= row < height and 0 <= col < width:
                                    total += (
                                        x[b, group * group_channels + i, row, col]
                                        * weight[o, i, ky, kx]
                                    )
                    out[b, o, y, x_pos] = total
    return out


def conv_transpose2d(x, weight, bias=None, stride=1):
    """Scatter-add every input pixel into its output window."""
    n, channels, height, width = x.shape
    _, out_channels, kernel_h, kernel_w = weight.shape
    out = np.zeros((n, out_channels, (height - 1) * stride + kernel_h, (width - 1) * stride + kernel_w))
    for b in range(n):
        for i in range(channels):
            for y in range(height):
                for x_pos in range(width):
                    out[
                        b, :, y * stride : y * stride + kernel_h, x_pos * stride : x_pos * stride + kernel_w
                    ] += x[b, i, y, x_pos] * weight[i]
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def avg_pool2d(x, kernel, stride):
    n, channels, height, width = x.shape
    out_h = (height - kernel) // stride + 1
    out_w = (width - kernel) // stride + 1
    out = np.zeros((n, channels, out_h, out_w))
    for b in range(n):
        for c in range(channels):
            for y in range(out_h):
                for x_pos in range(out_w):
                    window = x[b, c, y * stride : y * stride + kernel, x_pos * stride : x_pos * stride + kernel]
                    out[b, c, y, x_pos] = window.sum() / (kernel * kernel)
    return out


def bmm(a, b):
    """Triple loop over batch, rows and columns."""
    batch, rows, inner = a.shape
    cols = b.shape[2]
    out = np.zeros((batch, rows, cols))
    for k in range(batch):
        for i in range(rows):
            for j in range(cols):
                out[k, i, j] = sum(a[k, i, m] * b[k, m, j] for m in range(inner))
    return out


def soft_dice_loss(probs, target, smooth):
    """Sum over classes of ``1 - (2 sum(pt) + s) / (sum(p) + sum(t) + s)``."""
    total = 0.0
    for c in range(probs.shape[1]):
        p, t = probs[:, c], target[:, c]
        total += 1 - (2 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth)
    return total


def confusion_tally(pred, gt, classes):
    """Per-pixel loop building a ``gt x pred`` count matrix."""
    matrix = np.zeros((classes, classes), dtype=np.int64)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        matrix[int(g), int(p)] += 1
    return matrix


def dilate(mask, extent):
    """Set every pixel within ``extent // 2`` (Chebyshev) of a foreground pixel."""
    radius = extent // 2
    height, width = mask.shape
    out = np.zeros_like(mask)
    for y, x in zip(*np.nonzero(mask)):
        out[max(0, y - radius) : min(height, y + radius + 1), max(0, x - radius) : min(width, x + radius + 1)] = 1
    return out
