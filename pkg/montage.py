import logging
import os

from PIL import Image, ImageDraw, ImageFont

from volume_io import quantize

logger = logging.getLogger(__name__)

MARGIN = 10
CAPTION_GAP = 6

try:
    FONT = ImageFont.load_default()
except IOError:
    FONT = None


def _section_image(array):
    return Image.fromarray(quantize(array, 8))


def _text_size(draw, text):
    bbox = draw.textbbox((0, 0), text, font=FONT)
    return bbox[2] - bbox[0], bbox[3] - bbox[1]


def render_montage(volumes, z, y):
    """One row per volume: its xy section at z and its xz section at y, captioned.

    ``z`` and ``y`` are 1-based; each is clamped to the volume's extent.
    """
    if not volumes:
        raise ValueError("render_montage needs at least one volume")
    probe = ImageDraw.Draw(Image.new("L", (1, 1)))
    rows = []
    for name, volume in volumes.items():
        x_dim, y_dim, z_dim = volume.shape
        zi = min(max(z, 1), z_dim)
        yi = min(max(y, 1), y_dim)
        xy = _section_image(volume.data[:, :, zi - 1])
        xz = _section_image(volume.data[:, yi - 1, :])
        caption = f"{name}  xy@z={zi}  xz@y={yi}"
        rows.append((caption, xy, xz))

    caption_h = max(_text_size(probe, caption)[1] for caption, _, _ in rows)
    width = max(xy.width + xz.width + 3 * MARGIN for _, xy, xz in rows)
    width = max(width, max(_text_size(probe, c)[0] for c, _, _ in rows) + 2 * MARGIN)
    height = sum(caption_h + CAPTION_GAP + max(xy.height, xz.height) + MARGIN for _, xy, xz in rows) + MARGIN

    canvas = Image.new("L", (width, height), 255)
    draw = ImageDraw.Draw(canvas)
    y_offset = MARGIN
    for caption, xy, xz in rows:
        draw.text((MARGIN, y_offset), caption, font=FONT, fill=0)
        y_offset += caption_h + CAPTION_GAP
        canvas.paste(xy, (MARGIN, y_offset))
        canvas.paste(xz, (2 * MARGIN + xy.width, y_offset))
        y_offset += max(xy.height, xz.height) + MARGIN
    return canvas


def save_montage(volumes, path, z, y):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        render_montage(volumes, z, y).save(path)
        logger.info(f"Saved montage of {list(volumes)} to {path}")
        return True
    except (OSError, ValueError) as e:
        logger.error(f"Error saving montage to {path}: {e}")
        return False
