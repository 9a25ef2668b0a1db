export type Mode = "generate" | "edit";

export interface HistoryEntry {
  sketchHash: string;
  jobId: string;
  seed: number;
  thumbnail: Uint8Array; // result PNG bytes
}

// FNV-1a, enough to tell sketches apart in session history.
export function sketchHash(bytes: Uint8Array): string {
  let hash = 0x811c9dc5;
  for (let i = 0; i < bytes.length; i++) {
    hash ^= bytes[i];
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash.toString(16).padStart(8, "0");
}

export class SessionState {
  classLabel = "cat";
  seed = 0;
  beta = 1.0;
  guidedSteps = 25;
  mode: Mode = "generate";
  exemplar: Uint8Array | null = null;

  private entries: HistoryEntry[] = [];
  private inFlight = false;

  get history(): readonly HistoryEntry[] {
    return [...this.entries];
  }

  recordResult(entry: HistoryEntry): void {
    this.entries.push({ ...entry });
  }

  // One job at a time per tab: returns false when a submission is running.
  beginJob(): boolean {
    if (this.inFlight) return false;
    this.inFlight = true;
    return true;
  }

  endJob(): void {
    this.inFlight = false;
  }

  get busy(): boolean {
    return this.inFlight;
  }
}
