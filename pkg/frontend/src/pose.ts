/**
 * Keyboard-driven free-fly camera.
 *
 * Integration runs in fixed 5 ms substeps fed from an accumulator, so the
 * travelled distance depends only on wall time, not on how often the caller
 * ticks (a 30 Hz and a 120 Hz loop agree to well under 1%).
 */

import type { Quat, Vec3 } from "./protocol.js";

export const MOVE_SPEED = 1.5; // metres per second
export const TURN_SPEED = 1.2; // radians per second
export const PITCH_LIMIT = (85 * Math.PI) / 180;

const SUBSTEP_S = 0.005;

const MOVE_KEYS = new Set(["KeyW", "KeyA", "KeyS", "KeyD", "KeyR", "KeyF"]);
const TURN_KEYS = new Set(["ArrowLeft", "ArrowRight", "ArrowUp", "ArrowDown"]);

export class PoseController {
  position: Vec3;
  yaw = 0; // radians about +Y, 0 looks down -Z
  pitch = 0; // radians about the camera's X axis

  private readonly held = new Set<string>();
  private accumulator = 0;

  constructor(position: Vec3 = [0, 0, 0]) {
    this.position = [...position] as Vec3;
  }

  keyDown(code: string): boolean {
    if (!MOVE_KEYS.has(code) && !TURN_KEYS.has(code)) return false;
    this.held.add(code);
    return true;
  }

  keyUp(code: string): void {
    this.held.delete(code);
  }

  /** Advance by dt seconds of wall time. */
  tick(dt: number): void {
    this.accumulator += dt;
    while (this.accumulator >= SUBSTEP_S) {
      this.accumulator -= SUBSTEP_S;
      this.substep(SUBSTEP_S);
    }
  }

  private substep(dt: number): void {
    if (this.held.has("ArrowLeft")) this.yaw += TURN_SPEED * dt;
    if (this.held.has("ArrowRight")) this.yaw -= TURN_SPEED * dt;
    if (this.held.has("ArrowUp")) this.pitch += TURN_SPEED * dt;
    if (this.held.has("ArrowDown")) this.pitch -= TURN_SPEED * dt;
    this.pitch = Math.min(PITCH_LIMIT, Math.max(-PITCH_LIMIT, this.pitch));

    // Movement is yaw-relative and horizontal (pitch does not tilt WASD),
    // with R/F running straight up and down the world Y axis.
    const sin = Math.sin(this.yaw);
    const cos = Math.cos(this.yaw);
    const forward: Vec3 = [-sin, 0, -cos];
    const right: Vec3 = [cos, 0, -sin];
    let dx = 0;
    let dy = 0;
    let dz = 0;
    if (this.held.has("KeyW")) {
      dx += forward[0];
      dz += forward[2];
    }
    if (this.held.has("KeyS")) {
      dx -= forward[0];
      dz -= forward[2];
    }
    if (this.held.has("KeyD")) {
      dx += right[0];
      dz += right[2];
    }
    if (this.held.has("KeyA")) {
      dx -= right[0];
      dz -= right[2];
    }
    if (this.held.has("KeyR")) dy += 1;
    if (this.held.has("KeyF")) dy -= 1;
    const norm = Math.hypot(dx, dy, dz);
    if (norm > 0) {
      const step = (MOVE_SPEED * dt) / norm;
      this.position[0] += dx * step;
      this.position[1] += dy * step;
      this.position[2] += dz * step;
    }
  }

  /** Orientation as [x, y, z, w]: yaw about world Y, then pitch about local X. */
  rotation(): Quat {
    const cy = Math.cos(this.yaw / 2);
    const sy = Math.sin(this.yaw / 2);
    const cp = Math.cos(this.pitch / 2);
    const sp = Math.sin(this.pitch / 2);
    // q = yaw(Y) * pitch(X)
    return [cy * sp, sy * cp, -sy * sp, cy * cp] as Quat;
  }

  pose(): { position: Vec3; rotation: Quat } {
    return { position: [...this.position] as Vec3, rotation: this.rotation() };
  }
}
