"""dynslim: a dynamically-slimmable waveform U-Net speech enhancer.

The model runs at a discrete set of utilization factors (fractions of each
slimmable layer's channels); a lightweight routing subnet picks a
utilization factor per frame from the noisy input, trading compute for
enhancement quality on the fly.
"""

__version__ = "0.1.0"
