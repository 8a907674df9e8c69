"""Stock architectures used by the experiments and tests."""

from .connectivity import ArchSpec, Conv, FC, Flatten, MaxPool, SoftmaxXent


def mnist_arch():
    """Three conv layers for 28x28 grayscale digits.

    The classifier FC maps the flattened conv features straight to the
    ten logits, so the conv stack carries essentially all the capacity
    and compression transforms bite.
    """
    return ArchSpec(
        input_shape=(1, 28, 28),
        num_classes=10,
        layers=(
            Conv(32, 5, 5, padding="same", batch_norm=True),
            MaxPool(),
            Conv(64, 5, 5, padding="same", batch_norm=True),
            MaxPool(),
            Conv(64, 3, 3, padding="same", batch_norm=True),
            Flatten(),
            FC(10),
            SoftmaxXent(),
        ),
    ).validate()


def synth_arch(num_classes=4, size=16):
    """Small net sized for the synthetic blob dataset."""
    return ArchSpec(
        input_shape=(1, size, size),
        num_classes=num_classes,
        layers=(
            Conv(8, 3, 3, padding="same", batch_norm=True),
            MaxPool(),
            Conv(16, 3, 3, padding="same", batch_norm=True),
            MaxPool(),
            Flatten(),
            FC(num_classes),
            SoftmaxXent(),
        ),
    ).validate()


def tiny_arch(c1=3, c2=2, in_shape=(1, 8, 8), num_classes=3):
    """Minimal two-conv net for unit tests and permutation counting."""
    return ArchSpec(
        input_shape=in_shape,
        num_classes=num_classes,
        layers=(
            Conv(c1, 3, 3, padding="same", batch_norm=True),
            Conv(c2, 3, 3, padding="same", batch_norm=True),
            MaxPool(),
            Flatten(),
            FC(num_classes),
            SoftmaxXent(),
        ),
    ).validate()
