export type RequestGate = {
  next: () => number;
  isLatest: (token: number) => boolean;
  invalidate: () => void;
};

export function createRequestGate(): RequestGate {
  let current = 0;
  return {
    next() {
      current += 1;
      return current;
    },
    isLatest(token) {
      return token === current;
    },
    invalidate() {
      current += 1;
    },
  };
}
