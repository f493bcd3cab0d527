"""
Heatmap image of scanner origins per country.
"""
import logging
import math

import cv2
import numpy as np
from PIL import Image, ImageDraw, ImageFont

logger = logging.getLogger(__name__)


class CountryHeatmap:
    """Render (country, count) pairs as a grid of colour-mapped, labelled cells."""

    def __init__(self, columns=8, cell_size=64, colormap=cv2.COLORMAP_HOT):
        """
        Args:
            columns: Cells per row
            cell_size: Edge of one cell in pixels
            colormap: OpenCV colormap applied to the count intensities
        """
        self.columns = columns
        self.cell_size = cell_size
        self.colormap = colormap

    def intensities(self, counts):
        """Counts scaled to 0..255 on a log scale, laid out row-major."""
        rows = max(1, math.ceil(len(counts) / self.columns))
        grid = np.zeros((rows, self.columns), dtype=np.uint8)
        if not counts:
            return grid
        peak = math.log1p(max(count for _, count in counts))
        for index, (_, count) in enumerate(counts):
            level = math.log1p(count) / peak if peak else 0.0
            grid[index // self.columns, index % self.columns] = int(round(55 + 200 * level))
        return grid

    def render(self, counts):
        """
        Args:
            counts: list of (country, count) sorted by descending count

        Returns:
            PIL Image
        """
        grid = self.intensities(counts)
        coloured = cv2.applyColorMap(grid, self.colormap)
        cells = cv2.resize(coloured, (grid.shape[1] * self.cell_size, grid.shape[0] * self.cell_size),
                           interpolation=cv2.INTER_NEAREST)
        image = Image.fromarray(cv2.cvtColor(cells, cv2.COLOR_BGR2RGB))
        draw = ImageDraw.Draw(image)
        font = ImageFont.load_default()

        for index, (country, count) in enumerate(counts):
            row, column = divmod(index, self.columns)
            x, y = column * self.cell_size, row * self.cell_size
            # dark text on the bright end of the map
            fill = (0, 0, 0) if grid[row, column] > 170 else (255, 255, 255)
            draw.text((x + 6, y + 6), country, fill=fill, font=font)
            draw.text((x + 6, y + self.cell_size // 2), str(count), fill=fill, font=font)
            draw.rectangle([x, y, x + self.cell_size - 1, y + self.cell_size - 1],
                           outline=(64, 64, 64))
        # empty cells of the last row
        for index in range(len(counts), grid.size):
            row, column = divmod(index, self.columns)
            x, y = column * self.cell_size, row * self.cell_size
            draw.rectangle([x, y, x + self.cell_size - 1, y + self.cell_size - 1],
                           fill=(200, 200, 200), outline=(64, 64, 64))
        return image

    def save(self, counts, output_path):
        self.render(counts).convert("RGB").save(output_path)
        logger.info("Heatmap of %d countries written to %s", len(counts), output_path)
        return output_path
