def poly_lr(epoch, total_epochs, lr0=0.01, exponent=0.9):
    """Polynomial decay: ``lr0 * (1 - epoch / total_epochs) ** exponent``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1 - epoch / total_epochs) ** exponent
