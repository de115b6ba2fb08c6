# ML Module
