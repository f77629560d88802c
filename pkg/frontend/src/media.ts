export type MediaKind = 'image' | 'audio' | 'video' | 'thumbnail';

const IMAGE_EXT = new Set(['jpg', 'jpeg', 'png', 'gif', 'webp', 'bmp']);
const AUDIO_EXT = new Set(['wav', 'mp3', 'flac', 'ogg', 'm4a', 'aac']);
const VIDEO_EXT = new Set(['mp4', 'webm', 'mov', 'mkv', 'avi']);

/**
 * Infer how to present a candidate from its uri extension. Point clouds and
 * anything unrecognized display as a server-rendered thumbnail image.
 */
export function mediaKind(uri: string | null): MediaKind {
  if (!uri) return 'thumbnail';
  const clean = uri.split('?')[0].split('#')[0];
  const dot = clean.lastIndexOf('.');
  if (dot < 0) return 'thumbnail';
  const ext = clean.slice(dot + 1).toLowerCase();
  if (IMAGE_EXT.has(ext)) return 'image';
  if (AUDIO_EXT.has(ext)) return 'audio';
  if (VIDEO_EXT.has(ext)) return 'video';
  return 'thumbnail';
}
