"""Scikit-learn style segmenter wrapping the toy encoder, region prompting and decoder."""

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import decoder as dec
from .embeddings import ProjectionHead, SegTokenRaw, patch_statistics, project, toy_encode
from .exceptions import InvalidInputError
from .metrics import giou_dataset
from .rvls2m import AbsoluteThreshold, TopFraction, TopK, rvls2m_projected, validate_strategy
from .synthdata import LABELS
from .validation import check_binary_mask, check_image

DEFAULT_CUTOFF = 0.6


def make_strategy(tau, value):
    if tau == "topk":
        return TopK(int(value))
    if tau == "fraction":
        return TopFraction(float(value))
    if tau == "threshold":
        return AbsoluteThreshold(float(value))
    raise InvalidInputError(f"unknown tau strategy {tau!r}")


def _otsu(values, bins=64):
    hist, edges = np.histogram(values, bins=bins)
    centres = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centres)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return centres[int(np.argmax(between))]


def estimate_eccentricity(image):
    """Eccentricity of the largest bright blob, from second moments of its pixels."""
    img = ndimage.uniform_filter(check_image(image), size=5, mode="nearest")
    fg = img > _otsu(img.ravel())
    labelled, count = ndimage.label(fg)
    if count == 0:
        return 0.0
    sizes = np.bincount(labelled.ravel())[1:]
    ys, xs = np.nonzero(labelled == int(np.argmax(sizes)) + 1)
    if len(ys) < 3:
        return 0.0
    lam = np.linalg.eigvalsh(np.cov(np.stack([ys, xs]).astype(np.float64)))
    if lam[1] <= 0:
        return 0.0
    return float(np.sqrt(max(0.0, 1.0 - lam[0] / lam[1])))


def solve_seg_state(head, target, seed=0, restarts=16):
    """Find a raw seg state whose projection matches ``target`` in least squares."""
    target = np.asarray(target, dtype=np.float64)

    def residual(x):
        return head(x) - target

    def jacobian(x):
        z = head.w1 @ x + head.b1
        if head.nonlinearity == "relu":
            slope = (z > 0).astype(np.float64)
        else:
            slope = 1.0 - np.tanh(z) ** 2
        return head.w2 @ (slope[:, None] * head.w1)

    rng = np.random.default_rng(seed)
    tol = 1e-9 * max(1.0, float(np.linalg.norm(target)))
    best = None
    # relu heads have flat regions; restart from fresh seeded points until one converges
    for _ in range(restarts):
        sol = least_squares(residual, rng.normal(0.0, 1.0, head.in_dim), jac=jacobian,
                            method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000)
        err = float(np.linalg.norm(sol.fun))
        if best is None or err < best[1]:
            best = (sol.x, err)
        if err <= tol:
            break
    return best


class Sim4SegSegmenter(BaseEstimator):
    """Toy diagnosis-segmentation model.

    ``fit`` learns the segmentation-token concept: it regresses patch-level
    lesion occupancy on the image-token embeddings, rescales that direction to
    ``similarity_spread`` and solves for the raw hidden state whose projection
    hits it. With labels it also fits the eccentricity cutoff used for the
    benign/malignant call.

    Parameters
    ----------
    patch_size : int
        Side of the square patches turned into image tokens.
    embed_dim, hidden_dim, mid_dim : int
        Token width ``d``, raw seg-state width and projection hidden width.
    grid_size : int
        Region grid ``g``.
    tau, tau_value : str, float
        Thresholding rule (``"topk"``, ``"fraction"``, ``"threshold"``) and its parameter.
    beta, decision_threshold : float
        Decoder prompt gain and pixel threshold.
    random_state : int
        Seed for every seeded component.
    """

    def __init__(self, patch_size=2, embed_dim=16, hidden_dim=32, mid_dim=64,
                 nonlinearity="relu", grid_size=16, tau="topk", tau_value=36,
                 beta=4.0, decision_threshold=0.6, feature_scale=0.1,
                 similarity_spread=2.0, random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.mid_dim = mid_dim
        self.nonlinearity = nonlinearity
        self.grid_size = grid_size
        self.tau = tau
        self.tau_value = tau_value
        self.beta = beta
        self.decision_threshold = decision_threshold
        self.feature_scale = feature_scale
        self.similarity_spread = similarity_spread
        self.random_state = random_state

    # seeds for the independent seeded parts
    def _seed(self, offset):
        return int(np.random.SeedSequence([self.random_state, offset]).generate_state(1)[0])

    @property
    def tau_strategy(self):
        return make_strategy(self.tau, self.tau_value)

    @property
    def decoder_config(self):
        return dec.DecoderConfig(beta=self.beta, threshold=self.decision_threshold)

    def fit(self, X, y, labels=None):
        """Calibrate the seg concept from images ``X`` and binary masks ``y``."""
        images = [check_image(img, min_side=self.patch_size) for img in X]
        masks = [check_binary_mask(m) for m in y]
        if not images or len(images) != len(masks):
            raise InvalidInputError("X and y must be non-empty and equally long")
        validate_strategy(self.tau_strategy, self.grid_size)
        self.head_ = ProjectionHead(self.hidden_dim, self.mid_dim, self.embed_dim,
                                    self.nonlinearity, seed=self._seed(1))
        tokens, occupancy = [], []
        for img, mask in zip(images, masks):
            if img.shape != mask.shape:
                raise InvalidInputError("image and mask shapes differ")
            tokens.append(self.encode(img).values)
            occupancy.append(patch_statistics(mask.astype(np.float64), self.patch_size)[:, 0])
        E = np.concatenate(tokens)
        t = np.concatenate(occupancy)
        direction, *_ = np.linalg.lstsq(E - E.mean(axis=0), t - t.mean(), rcond=None)
        spread = np.std(E @ direction)
        if spread == 0:
            raise InvalidInputError("training tokens carry no lesion signal")
        target = direction * (self.similarity_spread / spread)
        self.seg_state_, self.concept_residual_ = solve_seg_state(
            self.head_, target, seed=self._seed(2))
        self.seg_embedding_ = project(SegTokenRaw(self.seg_state_), self.head_)

        self.cutoff_ = DEFAULT_CUTOFF
        if labels is not None:
            self.cutoff_ = self._fit_cutoff([estimate_eccentricity(i) for i in images], labels)
        return self

    @staticmethod
    def _fit_cutoff(scores, labels):
        scores = np.asarray(scores)
        truth = np.asarray([lab == LABELS[1] for lab in labels])
        cands = np.unique(scores)
        cands = np.concatenate([[cands[0] - 1e-6], (cands[:-1] + cands[1:]) / 2, [cands[-1]]])
        accs = [np.mean((scores > c) == truth) for c in cands]
        return float(cands[int(np.argmax(accs))])

    def encode(self, image):
        return toy_encode(image, self.patch_size, self.embed_dim, seed=self._seed(3))

    def features(self, image):
        return dec.extract_features(image, self.embed_dim, seed=self._seed(4),
                                    scale=self.feature_scale)

    def seg_token(self, image=None):
        """Raw seg-token hidden state of the toy language model (image independent)."""
        check_is_fitted(self, "seg_state_")
        return SegTokenRaw(self.seg_state_)

    def region_mask(self, image, seg=None):
        check_is_fitted(self, "seg_state_")
        seg = self.seg_embedding_ if seg is None else seg
        return rvls2m_projected(self.encode(image), seg, self.grid_size, self.tau_strategy)

    def decode_image(self, image, seg=None, region=None):
        check_is_fitted(self, "seg_state_")
        seg = self.seg_embedding_ if seg is None else seg
        if region is None:
            region = self.region_mask(image, seg)
        return dec.decode(self.features(image), seg, region, self.decoder_config)

    def transform(self, X):
        """Region prompts, shape ``(n_samples, g, g)``."""
        return np.stack([self.region_mask(img).bits for img in X])

    def predict(self, X):
        return np.stack([self.decode_image(img).bits for img in X])

    def diagnosis_score(self, image):
        return estimate_eccentricity(image)

    def predict_diagnosis(self, X):
        check_is_fitted(self, "cutoff_")
        return [LABELS[1] if self.diagnosis_score(img) > self.cutoff_ else LABELS[0]
                for img in X]

    def score(self, X, y):
        """gIoU of the predicted masks against ``y``."""
        return giou_dataset(zip(self.predict(X), y))
