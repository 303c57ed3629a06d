"""
This module serves as a namespace for the `torch.nn` building blocks of PersonSearch: the staged
backbone and its replicated re-ID tail, the detection head, the embedding head, and the joint
and standalone models that assemble them.
"""
