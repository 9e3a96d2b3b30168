export interface ServerInfo {
  H: number;
  W: number;
  t_min: number;
  t_max: number;
  u_range: [number, number];
  v_range: [number, number];
}

export function buildRenderUrl(base: string, u: number, v: number, depth: boolean): string {
  // 4-decimal viewpoints: matches the server's render-cache quantization
  const url = `${base}/api/render?u=${u.toFixed(4)}&v=${v.toFixed(4)}`;
  return depth ? `${url}&depth=1` : url;
}

export function parseInfo(doc: unknown): ServerInfo {
  const d = doc as Record<string, unknown>;
  const pair = (x: unknown): [number, number] => {
    if (!Array.isArray(x) || x.length !== 2 || !x.every((n) => Number.isFinite(n))) {
      throw new Error(`malformed range: ${JSON.stringify(x)}`);
    }
    return [x[0] as number, x[1] as number];
  };
  const num = (key: string): number => {
    const n = d[key];
    if (typeof n !== "number" || !Number.isFinite(n)) {
      throw new Error(`malformed info field ${key}: ${JSON.stringify(n)}`);
    }
    return n;
  };
  return {
    H: num("H"),
    W: num("W"),
    t_min: num("t_min"),
    t_max: num("t_max"),
    u_range: pair(d["u_range"]),
    v_range: pair(d["v_range"]),
  };
}

export async function fetchInfo(
  base: string,
  fetchImpl: typeof fetch = fetch,
): Promise<ServerInfo> {
  const resp = await fetchImpl(`${base}/api/info`);
  if (!resp.ok) {
    throw new Error(`info request failed: HTTP ${resp.status}`);
  }
  return parseInfo(await resp.json());
}
