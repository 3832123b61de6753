from allconv_emg.nn.functional import AdamState, adam_step
from allconv_emg.nn.layers import Parameter


class Adam:
    """Adam over a fixed list of :class:`Parameter` objects.

    Frozen parameters are skipped entirely: they keep no moment buffers and
    are never written.
    """

    def __init__(self, parameters: list[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.parameters = list(parameters)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self):
        live = [p for p in self.parameters if p.trainable]
        adam_step({p.name: p.value for p in live}, {p.name: p.grad for p in live}, self.state)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()
