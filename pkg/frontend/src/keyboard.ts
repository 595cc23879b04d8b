/** The 10-level rating grid, lowest to highest quality. */
export const LEVELS: readonly number[] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/**
 * Keyboard shortcut mapping: digit key k selects level k/10.
 * Returns null for any key that is not a plain digit.
 */
export function levelForKey(key: string): number | null {
  if (key.length !== 1 || key < "0" || key > "9") {
    return null;
  }
  return LEVELS[key.charCodeAt(0) - 48];
}
