"""Checagem de gradiente por diferenças finitas centrais, usada pelos testes."""
import torch


def numerical_gradient(fn, tensor, index, eps):
    """(f(x + eps) - f(x - eps)) / 2eps na entrada ``index`` de ``tensor``."""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + eps
        plus = float(fn())
        tensor[index] = original - eps
        minus = float(fn())
        tensor[index] = original
    return (plus - minus) / (2 * eps)


def assert_gradients_match(test_case, fn, tensors, indices, eps=1e-4, rtol=1e-3, atol=1e-8):
    """Compara o gradiente do autograd com diferenças finitas em cada (tensor, índice).

    ``fn`` devolve um escalar; ``indices`` é uma lista de pares (posição em ``tensors``, índice).
    """
    for tensor in tensors:
        tensor.grad = None
    value = fn()
    analytic = torch.autograd.grad(value, tensors, allow_unused=True)
    for position, index in indices:
        grad = analytic[position]
        expected = 0.0 if grad is None else grad[index].item()
        numeric = numerical_gradient(fn, tensors[position].data, index, eps)
        tolerance = rtol * max(abs(expected), abs(numeric)) + atol
        test_case.assertLessEqual(
            abs(expected - numeric), tolerance,
            f'tensor {position} index {index}: autograd={expected} numeric={numeric}',
        )


def random_indices(tensors, count, generator):
    """Sorteia ``count`` pares (posição, índice) uniformes sobre todas as entradas."""
    sizes = torch.tensor([tensor.numel() for tensor in tensors])
    offsets = torch.cumsum(sizes, 0) - sizes
    flat = torch.randperm(int(sizes.sum()), generator=generator)[:count]
    picked = []
    for item in flat.tolist():
        position = int(torch.searchsorted(offsets, torch.tensor(item), right=True)) - 1
        local = item - int(offsets[position])
        picked.append((position, tuple(int(i) for i in torch.unravel_index(torch.tensor(local), tensors[position].shape))))
    return picked
