// Canvas widgets: roll gauge with the 0.5 rad / 45 deg bands, top-down pose
// track, command-tracking strips, and reward-term bars.

import { RewardTerms } from "./protocol.js";
import { Sample, TrackPoint } from "./store.js";

const BSR_BAND = 0.5;              // rad
const FALL_BAND = Math.PI / 4;     // rad

function ctx2d(canvas: HTMLCanvasElement): CanvasRenderingContext2D {
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  return ctx;
}

export function drawRollGauge(canvas: HTMLCanvasElement, phi: number | null): void {
  const ctx = ctx2d(canvas);
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const cx = w / 2;
  const cy = h * 0.92;
  const r = Math.min(w * 0.45, h * 0.82);

  const span = Math.PI / 3; // gauge shows +/- 60 deg
  const angle = (x: number) => -Math.PI / 2 + (x / span) * (Math.PI / 2);

  const arc = (from: number, to: number, color: string) => {
    ctx.beginPath();
    ctx.strokeStyle = color;
    ctx.lineWidth = 14;
    ctx.arc(cx, cy, r, angle(from) - Math.PI / 2 + Math.PI / 2,
            angle(to) - Math.PI / 2 + Math.PI / 2);
    ctx.stroke();
  };
  arc(-span, -FALL_BAND, "#c0392b");
  arc(-FALL_BAND, -BSR_BAND, "#e67e22");
  arc(-BSR_BAND, BSR_BAND, "#27ae60");
  arc(BSR_BAND, FALL_BAND, "#e67e22");
  arc(FALL_BAND, span, "#c0392b");

  if (phi !== null) {
    const a = angle(Math.max(-span, Math.min(span, phi)));
    ctx.beginPath();
    ctx.strokeStyle = "#ecf0f1";
    ctx.lineWidth = 3;
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + r * 0.9 * Math.sin(a + Math.PI / 2) * -1,
               cy - r * 0.9 * Math.cos(a + Math.PI / 2) * -1);
    // needle along the gauge angle
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + r * 0.9 * Math.cos(a), cy + r * 0.9 * Math.sin(a));
    ctx.stroke();
    ctx.fillStyle = "#ecf0f1";
    ctx.font = "14px monospace";
    ctx.textAlign = "center";
    ctx.fillText(`${(phi * 180 / Math.PI).toFixed(1)} deg`, cx, cy - r - 8);
  }
}

export function drawTrack(canvas: HTMLCanvasElement, track: TrackPoint[]): void {
  const ctx = ctx2d(canvas);
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  if (track.length === 0) return;

  let minX = Infinity, maxX = -Infinity, minY = Infinity, maxY = -Infinity;
  for (const p of track) {
    minX = Math.min(minX, p.x); maxX = Math.max(maxX, p.x);
    minY = Math.min(minY, p.y); maxY = Math.max(maxY, p.y);
  }
  const pad = 2.0;
  const scale = Math.min(
    w / (maxX - minX + 2 * pad), h / (maxY - minY + 2 * pad),
  );
  const toPx = (p: { x: number; y: number }) => ({
    px: (p.x - minX + pad) * scale,
    py: h - (p.y - minY + pad) * scale,
  });

  ctx.beginPath();
  ctx.strokeStyle = "#3498db";
  ctx.lineWidth = 2;
  track.forEach((p, i) => {
    const { px, py } = toPx(p);
    if (i === 0) ctx.moveTo(px, py); else ctx.lineTo(px, py);
  });
  ctx.stroke();

  const last = track[track.length - 1];
  const { px, py } = toPx(last);
  ctx.save();
  ctx.translate(px, py);
  ctx.rotate(-last.psi);
  ctx.fillStyle = "#ecf0f1";
  ctx.beginPath();
  ctx.moveTo(10, 0);
  ctx.lineTo(-6, 5);
  ctx.lineTo(-6, -5);
  ctx.closePath();
  ctx.fill();
  ctx.restore();
}

export function drawStrip(
  canvas: HTMLCanvasElement,
  samples: Sample[],
  actual: (s: Sample) => number,
  command: (s: Sample) => number,
  label: string,
): void {
  const ctx = ctx2d(canvas);
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  if (samples.length < 2) return;

  const t0 = samples[0].t;
  const t1 = samples[samples.length - 1].t;
  let lo = Infinity, hi = -Infinity;
  for (const s of samples) {
    for (const v of [actual(s), command(s)]) {
      if (Number.isFinite(v)) {
        lo = Math.min(lo, v); hi = Math.max(hi, v);
      }
    }
  }
  if (!(hi > lo)) { hi = lo + 1; }
  const margin = 0.1 * (hi - lo);
  lo -= margin; hi += margin;
  const px = (t: number) => ((t - t0) / Math.max(t1 - t0, 1e-9)) * w;
  const py = (v: number) => h - ((v - lo) / (hi - lo)) * h;

  const plot = (get: (s: Sample) => number, color: string, dashed: boolean) => {
    ctx.beginPath();
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.5;
    ctx.setLineDash(dashed ? [5, 4] : []);
    let started = false;
    for (const s of samples) {
      const v = get(s);
      if (!Number.isFinite(v)) continue;
      if (!started) { ctx.moveTo(px(s.t), py(v)); started = true; }
      else ctx.lineTo(px(s.t), py(v));
    }
    ctx.stroke();
    ctx.setLineDash([]);
  };
  plot(command, "#f1c40f", true);
  plot(actual, "#3498db", false);
  ctx.fillStyle = "#95a5a6";
  ctx.font = "12px monospace";
  ctx.textAlign = "left";
  ctx.fillText(label, 6, 14);
}

const TERM_ORDER: (keyof RewardTerms)[] = ["surv", "vel", "steer", "act", "rate"];
const TERM_RANGE: Record<string, [number, number]> = {
  surv: [0, 1], vel: [0, 1], steer: [0, 1],
  act: [-2, 0], rate: [-2 * Math.SQRT2, 0],
};

export function drawRewardBars(canvas: HTMLCanvasElement,
                               terms: RewardTerms | null): void {
  const ctx = ctx2d(canvas);
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  if (terms === null) return;
  const barW = w / TERM_ORDER.length;
  TERM_ORDER.forEach((name, i) => {
    const [lo, hi] = TERM_RANGE[name];
    const frac = (terms[name] - lo) / (hi - lo);
    const bh = Math.max(2, frac * (h - 18));
    ctx.fillStyle = lo < 0 ? "#e67e22" : "#27ae60";
    ctx.fillRect(i * barW + 6, h - 16 - bh, barW - 12, bh);
    ctx.fillStyle = "#95a5a6";
    ctx.font = "11px monospace";
    ctx.textAlign = "center";
    ctx.fillText(name, i * barW + barW / 2, h - 4);
  });
}
