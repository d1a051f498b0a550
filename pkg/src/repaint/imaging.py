"""Image file helpers: loading references and reading encoded-image metadata."""

import io
import logging
from pathlib import Path

from PIL import Image, PngImagePlugin, UnidentifiedImageError

from repaint.core import ReferenceImage
from repaint.errors import ValidationError

# Configure logger
logger = logging.getLogger(__name__)


def read_image_size(data: bytes) -> tuple[int, int]:
    """Return (width, height) of an encoded image without decoding its pixels.

    Raises:
        ValidationError: If the bytes are not a recognizable image
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            return img.size
    except (UnidentifiedImageError, OSError) as e:
        raise ValidationError(f"not a decodable image: {e}") from e


def read_png_text(data: bytes) -> dict[str, str]:
    """Return the textual chunks of a PNG (empty for other formats)."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            text = getattr(img, "text", None)
            return dict(text) if text else {}
    except (UnidentifiedImageError, OSError):
        return {}


def encode_png(
    width: int,
    height: int,
    color: tuple[int, int, int],
    text: dict[str, str] | None = None,
) -> bytes:
    """Encode a solid-color PNG, optionally carrying text chunks."""
    info = PngImagePlugin.PngInfo()
    for key, value in sorted((text or {}).items()):
        info.add_text(key, value)
    buffer = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buffer, format="PNG", pnginfo=info)
    return buffer.getvalue()


def load_reference(
    path: str | Path,
    category: str | None = None,
    caption: str | None = None,
) -> ReferenceImage:
    """Read an image file into a ReferenceImage.

    Args:
        path: Image file path
        category: Optional manifest category label
        caption: Optional manifest caption used as understanding fallback

    Raises:
        ValidationError: If the file is unreadable or not an image
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ValidationError(f"cannot read image {path}: {e}") from e
    width, height = read_image_size(data)
    logger.debug(f"Loaded reference {path} ({width}x{height})")
    return ReferenceImage.from_bytes(
        data, width, height, category=category, caption=caption, name=path.stem
    )
