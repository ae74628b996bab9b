/** Client-side colormap for grayscale activation PNGs.
 *
 * The server stays colormap-free; tiles are recolored here and alpha-
 * blended over the anatomy slice.
 */

const STOPS: [number, [number, number, number]][] = [
  [0.0, [0, 0, 4]],
  [0.25, [87, 16, 110]],
  [0.5, [188, 55, 84]],
  [0.75, [249, 142, 9]],
  [1.0, [252, 255, 164]],
];

export function colormap(t: number): [number, number, number] {
  const x = Math.min(1, Math.max(0, t));
  for (let i = 1; i < STOPS.length; i++) {
    const [t1, c1] = STOPS[i];
    const [t0, c0] = STOPS[i - 1];
    if (x <= t1) {
      const f = (x - t0) / (t1 - t0);
      return [0, 1, 2].map((j) => Math.round(c0[j] + f * (c1[j] - c0[j]))) as [
        number,
        number,
        number,
      ];
    }
  }
  return STOPS[STOPS.length - 1][1];
}

/** Draw a grayscale image recolored + blended onto a base canvas context. */
export function blendHeatmap(
  ctx: CanvasRenderingContext2D,
  gray: HTMLImageElement,
  width: number,
  height: number,
  alpha = 0.55,
): void {
  const off = document.createElement("canvas");
  off.width = width;
  off.height = height;
  const offCtx = off.getContext("2d")!;
  offCtx.drawImage(gray, 0, 0, width, height);
  const data = offCtx.getImageData(0, 0, width, height);
  for (let i = 0; i < data.data.length; i += 4) {
    const value = data.data[i] / 255;
    const [r, g, b] = colormap(value);
    data.data[i] = r;
    data.data[i + 1] = g;
    data.data[i + 2] = b;
    data.data[i + 3] = Math.round(255 * alpha * value);
  }
  offCtx.putImageData(data, 0, 0);
  ctx.drawImage(off, 0, 0);
}
