"""Baseline sequential JPEG (8-bit, Huffman) encoder and decoder.

The encoder writes JFIF files with the standard quantization and Huffman
tables, either 4:2:0 or 4:4:4 chroma sampling.  The decoder reads any
baseline file with at most three components and sampling factors up to 2;
it keeps colour conversion in floating point and rounds once at the end.
"""
from __future__ import annotations

import struct

import numpy as np

# Standard tables, natural (row-major) order.
LUMA_QUANT = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)

CHROMA_QUANT = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
] + [99] * 32, dtype=np.int64).reshape(8, 8)


def _zigzag_order():
    order = sorted(((i, j) for i in range(8) for j in range(8)),
                   key=lambda p: (p[0] + p[1], p[0] if (p[0] + p[1]) % 2 else p[1]))
    return np.array([i * 8 + j for i, j in order], dtype=np.int64)


ZIGZAG = _zigzag_order()  # ZIGZAG[k] = natural index of the k-th zigzag coefficient

DC_LUMA = ((0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0), tuple(range(12)))
DC_CHROMA = ((0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0), tuple(range(12)))
AC_LUMA = ((0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D), (
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA))
AC_CHROMA = ((0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77), (
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA))

SUBSAMPLING = {"4:2:0": ((2, 2), (1, 1), (1, 1)), "4:4:4": ((1, 1), (1, 1), (1, 1))}


class JpegError(ValueError):
    """Malformed bitstream; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _dct_matrix():
    k = np.arange(8)
    c = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) * np.sqrt(2 / 8)
    c[0] /= np.sqrt(2)
    return c


DCT = _dct_matrix()  # orthonormal: coef = DCT @ block @ DCT.T


def quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Scale a base table; quality 100 makes every entry 1."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((base * scale + 50) // 100, 1, 255)


def huffman_codes(spec):
    """(bits, values) -> {value: (code, length)} following the canonical assignment."""
    bits, values = spec
    codes, code, k = {}, 0, 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            codes[values[k]] = (code, length)
            code += 1
            k += 1
        code <<= 1
    return codes


def rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _category(v):
    v = abs(int(v))
    return v.bit_length()


def _magnitude_bits(v, size):
    return v if v >= 0 else v + (1 << size) - 1


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.n = 0

    def write(self, value, length):
        self.acc = (self.acc << length) | (value & ((1 << length) - 1))
        self.n += length
        while self.n >= 8:
            self.n -= 8
            byte = (self.acc >> self.n) & 0xFF
            self.out.append(byte)
            if byte == 0xFF:
                self.out.append(0x00)
        self.acc &= (1 << self.n) - 1

    def flush(self):
        if self.n:
            self.write((1 << (8 - self.n)) - 1, 8 - self.n)  # pad with ones
        return bytes(self.out)


def _blocks(plane):
    """(H, W) with H, W multiples of 8 -> (H/8, W/8, 8, 8)."""
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _segment(marker, payload: bytes) -> bytes:
    return struct.pack(">HH", marker, len(payload) + 2) + payload


# Gram matrix of the YCbCr -> RGB map: squared RGB error of a YCbCr error d is d^T G d
_YCC_TO_RGB = np.array([[1.0, 0.0, 1.402], [1.0, -0.344136, -0.714136], [1.0, 1.772, 0.0]])
_RGB_GRAM = _YCC_TO_RGB.T @ _YCC_TO_RGB
_NEIGHBOURS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.float64)


def _round_jointly(scaled, tables):
    """Quantize co-sited Y, Cb, Cr coefficients together.

    With full-resolution chroma the IDCT is the same orthonormal map for all
    three planes and the colour transform is linear, so the squared RGB
    error splits into one 3-vector term per coefficient position.  Each
    triple takes the integer point, among the 27 around the rounded one,
    nearest the exact value under that colour metric.
    """
    x = np.stack(scaled, axis=-1)
    q = np.stack([t.reshape(8, 8) for t in tables], axis=-1).astype(np.float64)
    base = np.round(x)
    best, cost = base, np.full(x.shape[:-1], np.inf)
    for off in _NEIGHBOURS:
        d = (base + off - x) * q
        c = np.einsum("...i,ij,...j->...", d, _RGB_GRAM, d)
        better = c < cost - 1e-12
        cost = np.where(better, c, cost)
        best = np.where(better[..., None], base + off, best)
    return [best[..., i] for i in range(3)]


def encode(image: np.ndarray, quality: int = 75, subsampling: str = "4:2:0") -> bytes:
    """Encode an (H, W, 3) uint8 RGB image."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"encode expects (H, W, 3) uint8, got {img.shape} {img.dtype}")
    if subsampling not in SUBSAMPLING:
        raise ValueError(f"subsampling must be one of {sorted(SUBSAMPLING)}, got {subsampling!r}")
    h, w, _ = img.shape
    if h < 1 or w < 1 or h > 65535 or w > 65535:
        raise ValueError(f"unsupported image size {h}x{w}")
    factors = SUBSAMPLING[subsampling]
    hmax = max(f[0] for f in factors)
    vmax = max(f[1] for f in factors)
    mcu_w, mcu_h = 8 * hmax, 8 * vmax
    pw = -(-w // mcu_w) * mcu_w
    ph = -(-h // mcu_h) * mcu_h
    padded = np.pad(img, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge").astype(np.float64)
    ycc = rgb_to_ycbcr(padded)

    tables = [quality_table(LUMA_QUANT, quality), quality_table(CHROMA_QUANT, quality)]
    scaled = []
    for ci, (hs, vs) in enumerate(factors):
        plane = ycc[..., ci]
        fx, fy = hmax // hs, vmax // vs
        if fx > 1 or fy > 1:
            plane = plane.reshape(ph // fy, fy, pw // fx, fx).mean(axis=(1, 3))
        coef = DCT @ _blocks(plane - 128.0) @ DCT.T
        scaled.append(coef / tables[0 if ci == 0 else 1])
    if hmax == vmax == 1:
        planes = _round_jointly(scaled, [tables[0], tables[1], tables[1]])
    else:
        planes = [np.round(x) for x in scaled]
    planes = [np.clip(p, -2047, 2047).astype(np.int64) for p in planes]

    dc_codes = [huffman_codes(DC_LUMA), huffman_codes(DC_CHROMA)]
    ac_codes = [huffman_codes(AC_LUMA), huffman_codes(AC_CHROMA)]
    bw = _BitWriter()
    pred = [0, 0, 0]
    for my in range(ph // mcu_h):
        for mx in range(pw // mcu_w):
            for ci, (hs, vs) in enumerate(factors):
                t = 0 if ci == 0 else 1
                for by in range(vs):
                    for bx in range(hs):
                        block = planes[ci][my * vs + by, mx * hs + bx].reshape(64)[ZIGZAG]
                        diff = int(block[0]) - pred[ci]
                        pred[ci] = int(block[0])
                        size = _category(diff)
                        bw.write(*dc_codes[t][size])
                        if size:
                            bw.write(_magnitude_bits(diff, size), size)
                        run = 0
                        for v in block[1:]:
                            v = int(v)
                            if v == 0:
                                run += 1
                                continue
                            while run > 15:
                                bw.write(*ac_codes[t][0xF0])
                                run -= 16
                            size = _category(v)
                            bw.write(*ac_codes[t][(run << 4) | size])
                            bw.write(_magnitude_bits(v, size), size)
                            run = 0
                        if run:
                            bw.write(*ac_codes[t][0x00])
    scan = bw.flush()

    out = bytearray(b"\xff\xd8")
    out += _segment(0xFFE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00")
    for tid, table in enumerate(tables):
        out += _segment(0xFFDB, bytes([tid]) + bytes(table.reshape(64)[ZIGZAG].astype(np.uint8)))
    sof = struct.pack(">BHHB", 8, h, w, 3)
    for ci, (hs, vs) in enumerate(factors):
        sof += bytes([ci + 1, (hs << 4) | vs, 0 if ci == 0 else 1])
    out += _segment(0xFFC0, sof)
    for cls, tid, spec in ((0, 0, DC_LUMA), (1, 0, AC_LUMA), (0, 1, DC_CHROMA), (1, 1, AC_CHROMA)):
        out += _segment(0xFFC4, bytes([(cls << 4) | tid]) + bytes(spec[0]) + bytes(spec[1]))
    sos = bytes([3]) + b"".join(bytes([ci + 1, 0x00 if ci == 0 else 0x11]) for ci in range(3)) + b"\x00\x3f\x00"
    out += _segment(0xFFDA, sos)
    out += scan
    out += b"\xff\xd9"
    return bytes(out)


# ---------------------------------------------------------------- decoder


class _BitReader:
    def __init__(self, data: bytes, start: int):
        self.data = data
        self.pos = start
        self.acc = 0
        self.n = 0
        self.hit_marker = False

    def _fill(self):
        if self.pos >= len(self.data):
            raise JpegError("entropy-coded data runs past end of file", self.pos)
        byte = self.data[self.pos]
        if byte == 0xFF:
            nxt = self.data[self.pos + 1] if self.pos + 1 < len(self.data) else None
            if nxt == 0x00:
                self.pos += 2
            elif nxt is not None and 0xD0 <= nxt <= 0xD7:
                raise JpegError("restart markers are not supported", self.pos)
            else:
                # a marker ends the scan; feed ones so a truncated scan fails in the Huffman decoder
                self.hit_marker = True
                byte = 0xFF
        else:
            self.pos += 1
        self.acc = (self.acc << 8) | byte
        self.n += 8

    def bit(self):
        if self.n == 0:
            self._fill()
        self.n -= 1
        return (self.acc >> self.n) & 1

    def bits(self, length):
        v = 0
        for _ in range(length):
            v = (v << 1) | self.bit()
        return v


def _build_lookup(bits, values, offset):
    if sum(bits) != len(values):
        raise JpegError("Huffman table value count does not match its length counts", offset)
    table, code, k = {}, 0, 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            table[(length, code)] = values[k]
            code += 1
            k += 1
        code <<= 1
    return table


def _decode_symbol(reader: _BitReader, table):
    code = 0
    start = reader.pos
    for length in range(1, 17):
        code = (code << 1) | reader.bit()
        sym = table.get((length, code))
        if sym is not None:
            return sym
    raise JpegError("invalid Huffman code", start)


def _extend(v, size):
    return v - (1 << size) + 1 if size and v < (1 << (size - 1)) else v


def decode(data: bytes) -> np.ndarray:
    """Decode a baseline JPEG to an (H, W, 3) uint8 RGB array (grey files are expanded)."""
    data = bytes(data)
    if len(data) < 4 or data[:2] != b"\xff\xd8":
        raise JpegError("missing SOI marker", 0)
    pos = 2
    quant = {}
    huff = {}
    frame = None
    coefs = None
    while True:
        if pos + 2 > len(data):
            raise JpegError("unexpected end of file while looking for a marker", pos)
        if data[pos] != 0xFF:
            raise JpegError(f"expected marker, found byte 0x{data[pos]:02x}", pos)
        marker = data[pos + 1]
        if marker == 0xFF:
            pos += 1
            continue
        if marker == 0xD9:
            break
        if pos + 4 > len(data):
            raise JpegError("truncated segment header", pos)
        length = struct.unpack(">H", data[pos + 2 : pos + 4])[0]
        seg_start = pos + 4
        seg_end = pos + 2 + length
        if length < 2 or seg_end > len(data):
            raise JpegError(f"segment 0xFF{marker:02X} length {length} overruns the file", pos + 2)
        seg = data[seg_start:seg_end]
        if marker == 0xDB:
            i = 0
            while i < len(seg):
                pq, tq = seg[i] >> 4, seg[i] & 15
                if pq != 0:
                    raise JpegError("16-bit quantization tables are not supported", seg_start + i)
                if i + 65 > len(seg):
                    raise JpegError("truncated quantization table", seg_start + i)
                table = np.zeros(64, dtype=np.int64)
                table[ZIGZAG] = np.frombuffer(seg[i + 1 : i + 65], dtype=np.uint8)
                quant[tq] = table.reshape(8, 8)
                i += 65
        elif marker == 0xC4:
            i = 0
            while i < len(seg):
                if i + 17 > len(seg):
                    raise JpegError("truncated Huffman table", seg_start + i)
                tc, th = seg[i] >> 4, seg[i] & 15
                bits = tuple(seg[i + 1 : i + 17])
                count = sum(bits)
                if i + 17 + count > len(seg):
                    raise JpegError("truncated Huffman table values", seg_start + i)
                values = tuple(seg[i + 17 : i + 17 + count])
                huff[(tc, th)] = _build_lookup(bits, values, seg_start + i)
                i += 17 + count
        elif marker == 0xC0 or marker == 0xC1:
            if len(seg) < 6:
                raise JpegError("truncated frame header", seg_start)
            precision, h, w, nc = struct.unpack(">BHHB", seg[:6])
            if precision != 8:
                raise JpegError(f"sample precision {precision} is not supported", seg_start)
            if h == 0 or w == 0:
                raise JpegError("zero image dimension", seg_start + 1)
            if nc not in (1, 3) or len(seg) < 6 + 3 * nc:
                raise JpegError(f"unsupported component count {nc}", seg_start + 5)
            comps = []
            for k in range(nc):
                cid, hv, tq = seg[6 + 3 * k : 9 + 3 * k]
                hs, vs = hv >> 4, hv & 15
                if hs not in (1, 2) or vs not in (1, 2):
                    raise JpegError(f"sampling factor {hs}x{vs} is not supported", seg_start + 7 + 3 * k)
                comps.append({"id": cid, "h": hs, "v": vs, "tq": tq})
            frame = {"h": h, "w": w, "comps": comps}
        elif 0xC2 <= marker <= 0xCF and marker not in (0xC4, 0xC8, 0xCC):
            raise JpegError(f"only baseline sequential JPEG is supported (SOF 0xFF{marker:02X})", pos)
        elif marker == 0xDD:
            if struct.unpack(">H", seg[:2])[0] != 0:
                raise JpegError("restart intervals are not supported", seg_start)
        elif marker == 0xDA:
            if frame is None:
                raise JpegError("scan before frame header", pos)
            coefs, pos = _decode_scan(data, seg, seg_start, seg_end, frame, huff)
            continue
        pos = seg_end
    if frame is None or coefs is None:
        raise JpegError("no image data before EOI", pos)
    return _reconstruct(frame, coefs, quant, pos)


def _decode_scan(data, seg, seg_start, seg_end, frame, huff):
    ns = seg[0]
    comps = frame["comps"]
    if ns != len(comps):
        raise JpegError("only single interleaved scans covering every component are supported", seg_start)
    order = []
    for k in range(ns):
        cid, tables = seg[1 + 2 * k], seg[2 + 2 * k]
        idx = next((i for i, c in enumerate(comps) if c["id"] == cid), None)
        if idx is None:
            raise JpegError(f"scan names unknown component {cid}", seg_start + 1 + 2 * k)
        for key in ((0, tables >> 4), (1, tables & 15)):
            if key not in huff:
                raise JpegError(f"scan uses undefined Huffman table {key}", seg_start + 2 + 2 * k)
        order.append((idx, huff[(0, tables >> 4)], huff[(1, tables & 15)]))
    hmax = max(c["h"] for c in comps)
    vmax = max(c["v"] for c in comps)
    if ns == 1:
        hmax = vmax = comps[0]["h"] = comps[0]["v"] = 1
    mcux = -(-frame["w"] // (8 * hmax))
    mcuy = -(-frame["h"] // (8 * vmax))
    coefs = [np.zeros((mcuy * c["v"], mcux * c["h"], 64), dtype=np.int64) for c in comps]
    reader = _BitReader(data, seg_end)
    pred = [0] * len(comps)
    for my in range(mcuy):
        for mx in range(mcux):
            for idx, dc_tab, ac_tab in order:
                c = comps[idx]
                for by in range(c["v"]):
                    for bx in range(c["h"]):
                        zz = np.zeros(64, dtype=np.int64)
                        size = _decode_symbol(reader, dc_tab)
                        if size > 11:
                            raise JpegError(f"DC magnitude category {size} out of range", reader.pos)
                        pred[idx] += _extend(reader.bits(size), size)
                        zz[0] = pred[idx]
                        k = 1
                        while k < 64:
                            rs = _decode_symbol(reader, ac_tab)
                            run, size = rs >> 4, rs & 15
                            if size == 0:
                                if run == 15:
                                    k += 16
                                    continue
                                break
                            k += run
                            if k > 63:
                                raise JpegError("AC coefficient index past end of block", reader.pos)
                            zz[k] = _extend(reader.bits(size), size)
                            k += 1
                        if reader.hit_marker:
                            raise JpegError("scan data truncated by a marker", reader.pos)
                        block = np.zeros(64, dtype=np.int64)
                        block[ZIGZAG] = zz
                        coefs[idx][my * c["v"] + by, mx * c["h"] + bx] = block
    # skip any fill bytes up to the next marker
    pos = reader.pos
    while pos < len(data) and not (data[pos] == 0xFF and pos + 1 < len(data) and data[pos + 1] not in (0x00, 0xFF)):
        pos += 1
    frame["mcu"] = (mcux, mcuy, hmax, vmax)
    return coefs, pos


def _fancy_upsample(plane, axis):
    """Double one axis with 3/4-1/4 triangle weights, edges replicated."""
    p = np.moveaxis(plane, axis, 0)
    prev = np.concatenate([p[:1], p[:-1]], axis=0)
    nxt = np.concatenate([p[1:], p[-1:]], axis=0)
    out = np.empty((2 * p.shape[0],) + p.shape[1:])
    out[0::2] = 0.75 * p + 0.25 * prev
    out[1::2] = 0.75 * p + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _reconstruct(frame, coefs, quant, pos):
    mcux, mcuy, hmax, vmax = frame["mcu"]
    full_h, full_w = mcuy * 8 * vmax, mcux * 8 * hmax
    planes = []
    for c, blocks in zip(frame["comps"], coefs):
        if c["tq"] not in quant:
            raise JpegError(f"undefined quantization table {c['tq']}", pos)
        deq = blocks.reshape(blocks.shape[:2] + (8, 8)) * quant[c["tq"]]
        pix = DCT.T @ deq @ DCT + 128.0
        by, bx = pix.shape[:2]
        plane = pix.transpose(0, 2, 1, 3).reshape(by * 8, bx * 8)
        fy, fx = vmax // c["v"], hmax // c["h"]
        if fy == 2:
            plane = _fancy_upsample(plane, axis=0)
        if fx == 2:
            plane = _fancy_upsample(plane, axis=1)
        planes.append(plane[:full_h, :full_w])
    if len(planes) == 1:
        rgb = np.repeat(planes[0][..., None], 3, axis=-1)
    else:
        rgb = ycbcr_to_rgb(np.stack(planes, axis=-1))
    rgb = rgb[: frame["h"], : frame["w"]]
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def round_trip(image: np.ndarray, quality: int, subsampling: str = "4:2:0") -> np.ndarray:
    return decode(encode(image, quality, subsampling))
